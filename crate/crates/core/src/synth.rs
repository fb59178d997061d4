//! Synthetic articulated poses with rendered, optionally ambiguous,
//! joint heatmaps.
//!
//! Poses come from a kinematic chain: each joint rotates its bone about
//! the parent frame by Euler angles drawn uniformly from per-joint
//! ranges. Heatmaps are isotropic Gaussians at the orthographic (x, y)
//! projection. An ambiguous joint either gets a second mode at the
//! projection of a decoy bone (foreshortened or stretched in the image
//! and reflected in depth, same length) or, when that decoy would not
//! separate from the true blob, a single widened blob.

use std::ops::Range;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parallel::{map_indexed, Parallelism};
use crate::pose::io::{write_heatmaps, write_pose_set, PoseRecord};
use crate::pose::{
    center_pose, AmbiguityKind, Dataset, Heatmap, JointAmbiguity, ManifestSample, Pose3D, Sample, Skeleton,
};

const MAX_ATTEMPTS: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub skeleton: Skeleton,
    /// Length of the bone ending at each non-root joint, in joint index
    /// order (meters).
    pub bone_lengths: Vec<f32>,
    /// Bone direction of each non-root joint in the rest pose, parent
    /// frame, joint index order. Camera axes: x right, y down, z forward.
    pub rest_directions: Vec<[f32; 3]>,
    /// Per joint `[x, y, z]` Euler angle intervals in radians. The root
    /// entry orients the whole body.
    pub joint_angle_ranges: Vec<[[f32; 2]; 3]>,
    /// Heatmap grid is `grid_size x grid_size` cells.
    pub grid_size: usize,
    /// Half-width of the square region covered by the grid (meters).
    pub grid_extent: f32,
    /// Gaussian width in grid cells.
    pub heatmap_sigma: f32,
    pub ambiguity_rate: f32,
    /// Image-plane scale of the decoy bone relative to the true bone.
    pub decoy_scale: f32,
    /// Width multiplier for widened blobs.
    pub widen_factor: f32,
    pub sample_count: usize,
    pub seed: u64,
}

const PI: f32 = std::f32::consts::PI;

impl Default for SynthConfig {
    fn default() -> Self {
        let down = [0.0, 1.0, 0.0];
        let up = [0.0, -1.0, 0.0];
        let left = [1.0, 0.0, 0.0];
        let right = [-1.0, 0.0, 0.0];
        let z = [0.0, 0.0];
        SynthConfig {
            skeleton: Skeleton::default(),
            bone_lengths: vec![
                0.13, 0.45, 0.44, 0.13, 0.45, 0.44, 0.24, 0.25, 0.11, 0.12, 0.15, 0.28, 0.25, 0.15, 0.28, 0.25,
            ],
            rest_directions: vec![
                right, down, down, left, down, down, up, up, up, up, left, down, down, right, down, down,
            ],
            joint_angle_ranges: vec![
                [[-0.3, 0.3], [-PI, PI], [-0.2, 0.2]],   // pelvis: global orientation
                [[-0.1, 0.1], [-0.1, 0.1], [-0.1, 0.1]], // right hip
                [[-1.2, 0.6], [-0.3, 0.3], [-0.4, 0.3]], // right thigh
                [[-1.8, 0.0], [-0.2, 0.2], z],           // right shin
                [[-0.1, 0.1], [-0.1, 0.1], [-0.1, 0.1]], // left hip
                [[-1.2, 0.6], [-0.3, 0.3], [-0.3, 0.4]], // left thigh
                [[-1.8, 0.0], [-0.2, 0.2], z],           // left shin
                [[-0.4, 0.6], [-0.5, 0.5], [-0.3, 0.3]], // spine
                [[-0.3, 0.3], [-0.3, 0.3], [-0.2, 0.2]], // thorax
                [[-0.3, 0.3], [-0.3, 0.3], [-0.3, 0.3]], // neck
                [[-0.4, 0.4], [-0.6, 0.6], [-0.3, 0.3]], // head
                [[-0.2, 0.2], [-0.2, 0.2], [-0.2, 0.2]], // left shoulder
                [[-1.5, 1.5], [-0.5, 0.5], [-1.5, 0.2]], // left upper arm
                [[0.0, 2.2], [-0.3, 0.3], z],            // left forearm
                [[-0.2, 0.2], [-0.2, 0.2], [-0.2, 0.2]], // right shoulder
                [[-1.5, 1.5], [-0.5, 0.5], [-0.2, 1.5]], // right upper arm
                [[0.0, 2.2], [-0.3, 0.3], z],            // right forearm
            ],
            grid_size: 32,
            grid_extent: 1.1,
            heatmap_sigma: 1.0,
            ambiguity_rate: 0.3,
            decoy_scale: 0.4,
            widen_factor: 2.5,
            sample_count: 2000,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// A straight chain skeleton with uniform bones pointing down and the
    /// given symmetric angle range on every axis of every joint.
    pub fn chain(joints: usize, bone_length: f32, angle_range: f32) -> Self {
        let r = [-angle_range, angle_range];
        SynthConfig {
            skeleton: Skeleton::chain(joints),
            bone_lengths: vec![bone_length; joints.saturating_sub(1)],
            rest_directions: vec![[0.0, 1.0, 0.0]; joints.saturating_sub(1)],
            joint_angle_ranges: vec![[r, r, r]; joints],
            ..SynthConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.skeleton.validate()?;
        let j = self.skeleton.joint_count();
        if self.bone_lengths.len() != j - 1 || self.rest_directions.len() != j - 1 {
            return Err(Error::Parameter(format!(
                "expected {} bone lengths and rest directions, got {} and {}",
                j - 1,
                self.bone_lengths.len(),
                self.rest_directions.len()
            )));
        }
        if self.joint_angle_ranges.len() != j {
            return Err(Error::Parameter(format!(
                "expected {j} joint angle ranges, got {}",
                self.joint_angle_ranges.len()
            )));
        }
        if self.bone_lengths.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
            return Err(Error::Parameter("bone lengths must be positive".into()));
        }
        if self.rest_directions.iter().any(|d| norm(d.map(f64::from)) < 1e-6) {
            return Err(Error::Parameter("rest directions must be nonzero".into()));
        }
        if self.joint_angle_ranges.iter().flatten().any(|r| !(r[0] <= r[1])) {
            return Err(Error::Parameter("angle ranges must satisfy lo <= hi".into()));
        }
        if !(0.0..=1.0).contains(&self.ambiguity_rate) {
            return Err(Error::Parameter(format!(
                "ambiguity_rate {} outside [0, 1]",
                self.ambiguity_rate
            )));
        }
        if self.grid_size < 4 || !(self.grid_extent > 0.0) || !(self.heatmap_sigma > 0.0) {
            return Err(Error::Parameter(
                "grid_size >= 4, grid_extent > 0 and heatmap_sigma > 0 required".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.decoy_scale) || !(self.widen_factor >= 1.0) {
            return Err(Error::Parameter(
                "decoy_scale in [0, 1) and widen_factor >= 1 required".into(),
            ));
        }
        Ok(())
    }

    /// Index into `bone_lengths` / `rest_directions` for a non-root joint.
    fn bone_slot(&self, joint: usize) -> usize {
        if joint > self.skeleton.root {
            joint - 1
        } else {
            joint
        }
    }

    fn cell_size(&self) -> f64 {
        2.0 * self.grid_extent as f64 / self.grid_size as f64
    }

    /// Orthographic projection of a centered 3D point to grid coordinates
    /// `(column, row)`; cell centers sit at integer coordinates.
    pub fn project(&self, p: [f32; 3]) -> [f64; 2] {
        let cell = self.cell_size();
        [
            (p[0] as f64 + self.grid_extent as f64) / cell - 0.5,
            (p[1] as f64 + self.grid_extent as f64) / cell - 0.5,
        ]
    }

    fn inside(&self, q: [f64; 2]) -> bool {
        let hi = (self.grid_size - 1) as f64;
        (0.0..=hi).contains(&q[0]) && (0.0..=hi).contains(&q[1])
    }
}

type Mat3 = [[f64; 3]; 3];

fn matmul3(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

fn apply3(a: &Mat3, v: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|i| a[i][0] * v[0] + a[i][1] * v[1] + a[i][2] * v[2])
}

fn norm(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// `Rz(c) * Ry(b) * Rx(a)`.
fn euler(angles: [f64; 3]) -> Mat3 {
    let (sa, ca) = angles[0].sin_cos();
    let (sb, cb) = angles[1].sin_cos();
    let (sc, cc) = angles[2].sin_cos();
    let rx = [[1.0, 0.0, 0.0], [0.0, ca, -sa], [0.0, sa, ca]];
    let ry = [[cb, 0.0, sb], [0.0, 1.0, 0.0], [-sb, 0.0, cb]];
    let rz = [[cc, -sc, 0.0], [sc, cc, 0.0], [0.0, 0.0, 1.0]];
    matmul3(&rz, &matmul3(&ry, &rx))
}

/// Draws per-joint Euler angles uniformly from the configured ranges.
pub fn sample_angles<R: Rng + ?Sized>(config: &SynthConfig, rng: &mut R) -> Vec<[f64; 3]> {
    config
        .joint_angle_ranges
        .iter()
        .map(|axes| {
            axes.map(|[lo, hi]| {
                if lo == hi {
                    lo as f64
                } else {
                    rng.random_range(lo as f64..=hi as f64)
                }
            })
        })
        .collect()
}

/// Forward kinematics from per-joint angles; the root sits at the origin.
pub fn pose_from_angles(config: &SynthConfig, angles: &[[f64; 3]]) -> Pose3D {
    let sk = &config.skeleton;
    let j = sk.joint_count();
    let mut rot = vec![[[0.0; 3]; 3]; j];
    let mut pos = vec![[0.0f64; 3]; j];
    for joint in sk.topological_order() {
        if joint == sk.root {
            rot[joint] = euler(angles[joint]);
            continue;
        }
        let p = sk.parents[joint];
        rot[joint] = matmul3(&rot[p], &euler(angles[joint]));
        let slot = config.bone_slot(joint);
        let d = config.rest_directions[slot].map(f64::from);
        let n = norm(d);
        let len = config.bone_lengths[slot] as f64;
        let bone = apply3(&rot[joint], d.map(|v| v * len / n));
        pos[joint] = [0, 1, 2].map(|k| pos[p][k] + bone[k]);
    }
    Pose3D(pos.into_iter().map(|p| p.map(|v| v as f32)).collect())
}

/// A kinematically consistent random pose (root at the origin, not
/// centered).
pub fn generate_pose<R: Rng + ?Sized>(config: &SynthConfig, rng: &mut R) -> Pose3D {
    let angles = sample_angles(config, rng);
    pose_from_angles(config, &angles)
}

/// Heatmaps plus the ambiguity actually injected.
#[derive(Clone, Debug, PartialEq)]
pub struct Rendered {
    pub heatmaps: Vec<Heatmap>,
    pub ambiguity: Vec<JointAmbiguity>,
}

fn gaussian_grid(config: &SynthConfig, modes: &[([f64; 2], f64, f64)]) -> Result<Heatmap> {
    let n = config.grid_size;
    let mut values = vec![0.0f32; n * n];
    for (row, chunk) in values.chunks_exact_mut(n).enumerate() {
        for (col, v) in chunk.iter_mut().enumerate() {
            let mut acc = 0.0f64;
            for &(c, sigma, weight) in modes {
                let d2 = (col as f64 - c[0]).powi(2) + (row as f64 - c[1]).powi(2);
                acc += weight * (-d2 / (2.0 * sigma * sigma)).exp();
            }
            *v = acc as f32;
        }
    }
    let mut h = Heatmap::new(n, n, values)?;
    h.normalize()?;
    Ok(h)
}

/// Alternative position of `joint`: the bone's image-plane component is
/// scaled by `decoy_scale` (or by its inverse when `elongate`) and its depth
/// component is reflected, keeping the bone length. `None` for the root and
/// for an elongation that would exceed the bone length.
pub fn decoy_position(config: &SynthConfig, pose: &Pose3D, joint: usize, elongate: bool) -> Option<[f32; 3]> {
    let sk = &config.skeleton;
    if joint == sk.root {
        return None;
    }
    let parent = pose.0[sk.parents[joint]].map(f64::from);
    let child = pose.0[joint].map(f64::from);
    let b = [0, 1, 2].map(|k| child[k] - parent[k]);
    let len = norm(b);
    let s = if elongate {
        1.0 / config.decoy_scale as f64
    } else {
        config.decoy_scale as f64
    };
    let planar2 = s * s * (b[0] * b[0] + b[1] * b[1]);
    if planar2 > len * len {
        return None;
    }
    let depth = (len * len - planar2).max(0.0).sqrt();
    let sign = if b[2] >= 0.0 { -1.0 } else { 1.0 };
    let d = [s * b[0], s * b[1], sign * depth];
    Some([0, 1, 2].map(|k| (parent[k] + d[k]) as f32))
}

/// Renders one heatmap per joint for a centered pose. Fails with a
/// generation error when a joint (or decoy mode) projects outside the grid.
pub fn render_heatmaps<R: Rng + ?Sized>(pose: &Pose3D, config: &SynthConfig, rng: &mut R) -> Result<Rendered> {
    let sigma = config.heatmap_sigma as f64;
    let mut heatmaps = Vec::with_capacity(pose.joint_count());
    let mut ambiguity = Vec::new();
    for (joint, &p) in pose.0.iter().enumerate() {
        let q = config.project(p);
        if !config.inside(q) {
            return Err(Error::Generation(format!(
                "joint {joint} projects outside the heatmap grid"
            )));
        }
        let ambiguous = config.ambiguity_rate > 0.0 && rng.random::<f32>() < config.ambiguity_rate;
        if !ambiguous {
            heatmaps.push(gaussian_grid(config, &[(q, sigma, 1.0)])?);
            continue;
        }
        // the true joint may sit on either blob
        let elongate = rng.random::<bool>();
        let decoy =
            decoy_position(config, pose, joint, elongate).or_else(|| decoy_position(config, pose, joint, false));
        let decoy_q = decoy.map(|d| config.project(d));
        let separated = decoy_q.filter(|dq| ((dq[0] - q[0]).powi(2) + (dq[1] - q[1]).powi(2)).sqrt() >= 2.0 * sigma);
        match separated {
            Some(dq) => {
                if !config.inside(dq) {
                    return Err(Error::Generation(format!(
                        "decoy of joint {joint} projects outside the grid"
                    )));
                }
                heatmaps.push(gaussian_grid(config, &[(q, sigma, 0.5), (dq, sigma, 0.5)])?);
                ambiguity.push(JointAmbiguity {
                    joint,
                    kind: AmbiguityKind::Bimodal,
                    decoy,
                });
            }
            None => {
                heatmaps.push(gaussian_grid(config, &[(q, sigma * config.widen_factor as f64, 1.0)])?);
                ambiguity.push(JointAmbiguity {
                    joint,
                    kind: AmbiguityKind::Widened,
                    decoy,
                });
            }
        }
    }
    Ok(Rendered { heatmaps, ambiguity })
}

/// Generator seeded from `(seed, index)`, so any sample can be produced
/// independently of the others.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    crate::parallel::stream_rng(seed, index)
}

pub fn sample_id(index: usize) -> String {
    format!("s{index:06}")
}

/// Generates sample `index`: a centered pose, its heatmaps and max-arg 2D
/// joints. Poses that leave the grid are redrawn up to 100 times.
pub fn generate_sample(config: &SynthConfig, index: usize) -> Result<Sample> {
    let mut rng = sample_rng(config.seed, index as u64);
    for _ in 0..MAX_ATTEMPTS {
        let pose = center_pose(&generate_pose(config, &mut rng))?;
        match render_heatmaps(&pose, config, &mut rng) {
            Ok(r) => {
                let sample = Sample {
                    id: sample_id(index),
                    joints2d: None,
                    pose: Some(pose),
                    heatmaps: r.heatmaps,
                    ambiguity: r.ambiguity,
                };
                return Ok(Sample {
                    joints2d: sample.detections(),
                    ..sample
                });
            }
            Err(Error::Generation(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::Generation(format!(
        "sample {index}: no pose fit inside the grid after {MAX_ATTEMPTS} attempts"
    )))
}

/// Samples `range` of the configured stream, held in memory.
pub fn synthesize_range(config: &SynthConfig, range: Range<usize>, mode: Parallelism) -> Result<Dataset> {
    config.validate()?;
    let start = range.start;
    let samples = map_indexed(range.len(), mode, |i| generate_sample(config, start + i))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        skeleton: config.skeleton.clone(),
        samples,
    })
}

pub fn synthesize(config: &SynthConfig, mode: Parallelism) -> Result<Dataset> {
    synthesize_range(config, 0..config.sample_count, mode)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: SynthConfig,
    pub seed: u64,
    pub sample_count: usize,
    pub ambiguous_joint_fraction: f64,
    pub bimodal_joint_fraction: f64,
    pub samples: Vec<ManifestSample>,
}

impl Manifest {
    pub fn describe(config: &SynthConfig, ds: &Dataset) -> Self {
        let joints = (ds.len() * ds.joint_count()).max(1) as f64;
        let ambiguous: usize = ds.samples.iter().map(|s| s.ambiguity.len()).sum();
        let bimodal = ds
            .samples
            .iter()
            .flat_map(|s| &s.ambiguity)
            .filter(|a| a.kind == AmbiguityKind::Bimodal)
            .count();
        Manifest {
            config: config.clone(),
            seed: config.seed,
            sample_count: ds.len(),
            ambiguous_joint_fraction: ambiguous as f64 / joints,
            bimodal_joint_fraction: bimodal as f64 / joints,
            samples: ds
                .samples
                .iter()
                .map(|s| ManifestSample {
                    id: s.id.clone(),
                    ambiguity: s.ambiguity.clone(),
                })
                .collect(),
        }
    }
}

/// Writes `poses.jsonl`, `heatmaps/<id>.fmhm` and `manifest.json` under
/// `out_dir`.
pub fn write_dataset(config: &SynthConfig, ds: &Dataset, out_dir: &Path) -> Result<Manifest> {
    let heat_dir = out_dir.join("heatmaps");
    std::fs::create_dir_all(&heat_dir).map_err(|e| Error::io(&heat_dir, e))?;
    let mut records = Vec::with_capacity(ds.len());
    for s in &ds.samples {
        let rel = format!("heatmaps/{}.fmhm", s.id);
        write_heatmaps(&out_dir.join(&rel), &s.heatmaps)?;
        records.push(PoseRecord {
            id: s.id.clone(),
            joints2d: s.joints2d.as_ref().map(|p| p.0.clone()),
            heatmap_file: Some(rel),
            joints3d: s.pose.as_ref().map(|p| p.0.clone()),
        });
    }
    write_pose_set(&out_dir.join("poses.jsonl"), &records)?;
    let manifest = Manifest::describe(config, ds);
    let path = out_dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Data(e.to_string()))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Synthesizes `config.sample_count` samples and writes them to `out_dir`.
pub fn make_dataset(config: &SynthConfig, out_dir: &Path, mode: Parallelism) -> Result<Manifest> {
    let ds = synthesize(config, mode)?;
    write_dataset(config, &ds, out_dir)
}
