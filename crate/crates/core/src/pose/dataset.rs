use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::io::{read_heatmaps, read_pose_set, PoseRecord};
use super::{Heatmap, Pose2D, Pose3D, Skeleton, Standardizer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AmbiguityKind {
    /// Two separated modes; the ground truth sits under one of them.
    Bimodal,
    /// One blob centered on the ground truth, wider than usual.
    Widened,
}

/// Heatmap ambiguity injected for one joint of one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointAmbiguity {
    pub joint: usize,
    pub kind: AmbiguityKind,
    /// 3D position of the alternative joint location, in the same
    /// (mean-centered) frame as the ground-truth pose.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decoy: Option<[f32; 3]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub pose: Option<Pose3D>,
    pub joints2d: Option<Pose2D>,
    pub heatmaps: Vec<Heatmap>,
    pub ambiguity: Vec<JointAmbiguity>,
}

impl Sample {
    pub fn has_bimodal_joint(&self) -> bool {
        self.ambiguity.iter().any(|a| a.kind == AmbiguityKind::Bimodal)
    }

    /// Max-arg positions of the heatmaps, or the stored 2D joints when the
    /// sample has no heatmaps.
    pub fn detections(&self) -> Option<Pose2D> {
        if self.heatmaps.is_empty() {
            return self.joints2d.clone();
        }
        Some(Pose2D(self.heatmaps.iter().map(|h| h.position(h.argmax())).collect()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub skeleton: Skeleton,
    pub samples: Vec<Sample>,
}

/// Per-sample metadata stored in a synthetic dataset manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestSample {
    pub id: String,
    pub ambiguity: Vec<JointAmbiguity>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn joint_count(&self) -> usize {
        self.skeleton.joint_count()
    }

    pub fn subset(&self, range: std::ops::Range<usize>) -> Dataset {
        Dataset {
            skeleton: self.skeleton.clone(),
            samples: self.samples[range].to_vec(),
        }
    }

    /// Fits 2D normalization statistics on the samples' detections.
    pub fn fit_standardizer(&self) -> Result<Standardizer> {
        let dets: Vec<Pose2D> = self.samples.iter().filter_map(Sample::detections).collect();
        Standardizer::fit(&dets)
    }

    /// Checks every sample against the skeleton; `training` additionally
    /// requires heatmaps and 3D ground truth.
    pub fn validate(&self, training: bool) -> Result<()> {
        let j = self.joint_count();
        for s in &self.samples {
            if let Some(p) = &s.pose {
                if p.joint_count() != j {
                    return Err(Error::Incompatible(format!(
                        "sample {} has {} joints, skeleton has {j}",
                        s.id,
                        p.joint_count()
                    )));
                }
            }
            if !s.heatmaps.is_empty() && s.heatmaps.len() != j {
                return Err(Error::Incompatible(format!(
                    "sample {} has {} heatmaps, skeleton has {j} joints",
                    s.id,
                    s.heatmaps.len()
                )));
            }
            if training && s.heatmaps.is_empty() {
                return Err(Error::Data(format!("sample {} has no heatmaps", s.id)));
            }
            if training && s.pose.is_none() {
                return Err(Error::Data(format!("sample {} has no 3D ground truth", s.id)));
            }
        }
        Ok(())
    }

    /// Loads a PoseSet file (or a directory containing `poses.jsonl`).
    /// Heatmap paths are resolved relative to the PoseSet file. A
    /// `manifest.json` next to it, when present, supplies the skeleton and
    /// ambiguity metadata.
    pub fn load(path: &Path) -> Result<Dataset> {
        let file: PathBuf = if path.is_dir() {
            path.join("poses.jsonl")
        } else {
            path.to_path_buf()
        };
        let base = file.parent().unwrap_or(Path::new(".")).to_path_buf();
        let records = read_pose_set(&file)?;
        let manifest = base.join("manifest.json");
        let (skeleton, meta) = if manifest.exists() {
            let text = std::fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
            let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Format {
                path: manifest.clone(),
                reason: e.to_string(),
            })?;
            let skeleton = value
                .pointer("/config/skeleton")
                .map(|s| serde_json::from_value::<Skeleton>(s.clone()))
                .transpose()
                .map_err(|e| Error::Format {
                    path: manifest.clone(),
                    reason: e.to_string(),
                })?;
            let meta: Vec<ManifestSample> = value
                .get("samples")
                .map(|s| serde_json::from_value(s.clone()))
                .transpose()
                .map_err(|e| Error::Format {
                    path: manifest.clone(),
                    reason: e.to_string(),
                })?
                .unwrap_or_default();
            (skeleton, meta)
        } else {
            (None, Vec::new())
        };
        let meta: std::collections::HashMap<String, Vec<JointAmbiguity>> =
            meta.into_iter().map(|m| (m.id, m.ambiguity)).collect();

        let mut samples = Vec::with_capacity(records.len());
        for r in records {
            samples.push(sample_from_record(&base, r, &meta)?);
        }
        let skeleton = match skeleton {
            Some(s) => s,
            None => {
                let j = samples.iter().find_map(|s| {
                    s.pose
                        .as_ref()
                        .map(Pose3D::joint_count)
                        .or(s.joints2d.as_ref().map(Pose2D::joint_count))
                        .or((!s.heatmaps.is_empty()).then_some(s.heatmaps.len()))
                });
                match j {
                    Some(17) | None => Skeleton::default(),
                    Some(n) => Skeleton::chain(n),
                }
            }
        };
        skeleton.validate()?;
        let ds = Dataset { skeleton, samples };
        ds.validate(false)?;
        Ok(ds)
    }
}

fn sample_from_record(
    base: &Path,
    r: PoseRecord,
    meta: &std::collections::HashMap<String, Vec<JointAmbiguity>>,
) -> Result<Sample> {
    let heatmaps = match &r.heatmap_file {
        Some(f) => read_heatmaps(&base.join(f))?,
        None => Vec::new(),
    };
    Ok(Sample {
        ambiguity: meta.get(&r.id).cloned().unwrap_or_default(),
        id: r.id,
        pose: r.joints3d.map(Pose3D),
        joints2d: r.joints2d.map(Pose2D),
        heatmaps,
    })
}
