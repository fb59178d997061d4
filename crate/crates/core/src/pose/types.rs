use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `J x 3` joint positions in meters, camera coordinates (z along the
/// optical axis).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Pose3D(pub Vec<[f32; 3]>);

/// `J x 2` joint positions in detector (heatmap grid) coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Pose2D(pub Vec<[f32; 2]>);

impl Pose3D {
    pub fn zeros(joints: usize) -> Self {
        Pose3D(vec![[0.0; 3]; joints])
    }

    pub fn joint_count(&self) -> usize {
        self.0.len()
    }

    pub fn joints(&self) -> &[[f32; 3]] {
        &self.0
    }

    pub fn flat(&self) -> Vec<f32> {
        self.0.iter().flatten().copied().collect()
    }

    pub fn from_flat(values: &[f32]) -> Result<Self> {
        if !values.len().is_multiple_of(3) {
            return Err(Error::dim("pose from flat values", &[values.len()], &[3]));
        }
        Ok(Pose3D(values.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()))
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|v| v.is_finite())
    }

    pub fn mean(&self) -> [f64; 3] {
        let mut m = [0.0f64; 3];
        for p in &self.0 {
            for k in 0..3 {
                m[k] += p[k] as f64;
            }
        }
        let n = self.0.len().max(1) as f64;
        m.map(|v| v / n)
    }

    pub fn translated(&self, offset: [f32; 3]) -> Self {
        Pose3D(
            self.0
                .iter()
                .map(|p| [p[0] + offset[0], p[1] + offset[1], p[2] + offset[2]])
                .collect(),
        )
    }
}

impl Pose2D {
    pub fn joint_count(&self) -> usize {
        self.0.len()
    }
}

/// Subtracts the per-coordinate mean over joints.
pub fn center_pose(raw: &Pose3D) -> Result<Pose3D> {
    if let Some(j) = raw.0.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
        return Err(Error::Data(format!("non-finite coordinate at joint {j}")));
    }
    let m = raw.mean();
    Ok(Pose3D(
        raw.0
            .iter()
            .map(|p| {
                [
                    (p[0] as f64 - m[0]) as f32,
                    (p[1] as f64 - m[1]) as f32,
                    (p[2] as f64 - m[2]) as f32,
                ]
            })
            .collect(),
    ))
}

/// Per-coordinate affine normalization of 2D detections.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: [f32; 2],
    pub std: [f32; 2],
}

impl Standardizer {
    pub fn identity() -> Self {
        Standardizer {
            mean: [0.0; 2],
            std: [1.0; 2],
        }
    }

    pub fn apply(&self, p: [f32; 2]) -> [f32; 2] {
        [(p[0] - self.mean[0]) / self.std[0], (p[1] - self.mean[1]) / self.std[1]]
    }

    pub fn invert(&self, p: [f32; 2]) -> [f32; 2] {
        [p[0] * self.std[0] + self.mean[0], p[1] * self.std[1] + self.mean[1]]
    }

    /// Population statistics over every joint of every pose.
    pub fn fit(dataset: &[Pose2D]) -> Result<Self> {
        if dataset.len() < 2 {
            return Err(Error::Data(format!(
                "standardization needs >= 2 samples, got {}",
                dataset.len()
            )));
        }
        let mut sum = [0.0f64; 2];
        let mut count = 0usize;
        for p in dataset.iter().flat_map(|p| &p.0) {
            sum[0] += p[0] as f64;
            sum[1] += p[1] as f64;
            count += 1;
        }
        let mean = sum.map(|s| s / count as f64);
        let mut var = [0.0f64; 2];
        for p in dataset.iter().flat_map(|p| &p.0) {
            var[0] += (p[0] as f64 - mean[0]).powi(2);
            var[1] += (p[1] as f64 - mean[1]).powi(2);
        }
        let var = var.map(|v| v / count as f64);
        if var.iter().any(|&v| !(v > 1e-12)) {
            return Err(Error::Data(format!("degenerate 2D data: variance {var:?}")));
        }
        Ok(Standardizer {
            mean: mean.map(|m| m as f32),
            std: var.map(|v| v.sqrt() as f32),
        })
    }
}

/// Fits a [`Standardizer`] on `dataset` and applies it.
pub fn standardize_2d(dataset: &[Pose2D]) -> Result<(Vec<Pose2D>, Standardizer)> {
    let s = Standardizer::fit(dataset)?;
    let out = dataset
        .iter()
        .map(|p| Pose2D(p.0.iter().map(|&q| s.apply(q)).collect()))
        .collect();
    Ok((out, s))
}

/// One joint's probability grid, row-major `height x width`.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
    /// Detector pixels per grid cell.
    pub pixel_scale: f32,
}

impl Heatmap {
    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if height < 4 || width < 4 {
            return Err(Error::Parameter(format!(
                "heatmap grid {height}x{width} smaller than 4x4"
            )));
        }
        if values.len() != height * width {
            return Err(Error::dim("heatmap values", &[height, width], &[values.len()]));
        }
        if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Data("heatmap values must be finite and non-negative".into()));
        }
        Ok(Heatmap {
            height,
            width,
            values,
            pixel_scale: 1.0,
        })
    }

    pub fn cells(&self) -> usize {
        self.values.len()
    }

    /// Grid coordinates `(x, y) = (column, row)` of a flat cell index.
    pub fn position(&self, cell: usize) -> [f32; 2] {
        [
            (cell % self.width) as f32 * self.pixel_scale,
            (cell / self.width) as f32 * self.pixel_scale,
        ]
    }

    /// Rescales to unit mass. Fails on an all-zero grid.
    pub fn normalize(&mut self) -> Result<()> {
        let total: f64 = self.values.iter().map(|&v| v as f64).sum();
        if !(total > 0.0) {
            return Err(Error::Data("heatmap has zero total mass".into()));
        }
        for v in &mut self.values {
            *v = (*v as f64 / total) as f32;
        }
        Ok(())
    }

    /// First cell of maximum value in row-major order.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        best
    }
}

/// `H` sampled poses for one input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HypothesisSet {
    pub source_id: String,
    pub hypotheses: Vec<Pose3D>,
}

impl HypothesisSet {
    pub fn new(source_id: impl Into<String>, hypotheses: Vec<Pose3D>) -> Result<Self> {
        if hypotheses.is_empty() {
            return Err(Error::Parameter("hypothesis set must contain at least one pose".into()));
        }
        if let Some(h) = hypotheses.iter().position(|p| !p.is_finite()) {
            return Err(Error::Data(format!("hypothesis {h} is not finite")));
        }
        Ok(HypothesisSet {
            source_id: source_id.into(),
            hypotheses,
        })
    }

    pub fn len(&self) -> usize {
        self.hypotheses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hypotheses.is_empty()
    }
}
