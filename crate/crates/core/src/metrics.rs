//! Pose-error metrics over hypothesis sets. All distances are reported in
//! millimeters; poses are stored in meters.

use std::fmt::Write as _;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pose::{HypothesisSet, Pose3D};

pub const PCK_THRESHOLD_MM: f64 = 150.0;
pub const CPS_MAX_MM: usize = 300;

fn check(pred: &Pose3D, gt: &Pose3D) -> Result<()> {
    if pred.joint_count() != gt.joint_count() {
        return Err(Error::Incompatible(format!(
            "prediction has {} joints, ground truth {}",
            pred.joint_count(),
            gt.joint_count()
        )));
    }
    if gt.joint_count() == 0 {
        return Err(Error::Data("pose has no joints".into()));
    }
    Ok(())
}

fn to_f64(p: &Pose3D) -> Vec<Vector3<f64>> {
    p.joints()
        .iter()
        .map(|j| Vector3::new(j[0] as f64, j[1] as f64, j[2] as f64))
        .collect()
}

/// Per-joint Euclidean errors in mm after moving both roots to the origin.
pub fn joint_errors(pred: &Pose3D, gt: &Pose3D, root: usize) -> Result<Vec<f64>> {
    check(pred, gt)?;
    if root >= gt.joint_count() {
        return Err(Error::Parameter(format!("root joint {root} out of range")));
    }
    let (p, g) = (to_f64(pred), to_f64(gt));
    let (pr, gr) = (p[root], g[root]);
    Ok(p.iter()
        .zip(&g)
        .map(|(a, b)| ((a - pr) - (b - gr)).norm() * 1000.0)
        .collect())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Mean per-joint position error after root alignment, in mm.
pub fn mpjpe(pred: &Pose3D, gt: &Pose3D, root: usize) -> Result<f64> {
    Ok(mean(&joint_errors(pred, gt, root)?))
}

/// `x -> scale * rotation * x + translation`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Similarity {
    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.scale * self.rotation * x + self.translation
    }
}

fn centroid(p: &[Vector3<f64>]) -> Vector3<f64> {
    p.iter().fold(Vector3::zeros(), |a, b| a + b) / p.len() as f64
}

/// Least-squares similarity transform taking `pred` onto `gt`, from the SVD
/// of the centered cross-covariance with the reflection sign fixed so that
/// the rotation is proper.
pub fn similarity_fit(pred: &[Vector3<f64>], gt: &[Vector3<f64>]) -> Result<Similarity> {
    if pred.len() != gt.len() {
        return Err(Error::dim("alignment", &[pred.len(), 3], &[gt.len(), 3]));
    }
    if pred.len() < 3 {
        return Err(Error::Alignment(format!("{} joints, need at least 3", pred.len())));
    }
    let (mp, mg) = (centroid(pred), centroid(gt));
    let mut cov = Matrix3::zeros();
    let mut var_p = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        let (pc, gc) = (p - mp, g - mg);
        cov += gc * pc.transpose();
        var_p += pc.norm_squared();
    }
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.expect("requested U"), svd.v_t.expect("requested V^T"));
    let s = svd.singular_values;
    let mut order = [0, 1, 2];
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
    if !(s[order[0]] > 0.0) || s[order[1]] <= 1e-9 * s[order[0]] || var_p <= 0.0 {
        return Err(Error::Alignment(
            "pose is rank deficient (collinear or coincident joints)".into(),
        ));
    }
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        // flip the direction of least variance
        d[(order[2], order[2])] = -1.0;
    }
    let rotation = u * d * v_t;
    let scale = (0..3).map(|i| d[(i, i)] * s[i]).sum::<f64>() / var_p;
    Ok(Similarity {
        scale,
        rotation,
        translation: mg - scale * rotation * mp,
    })
}

/// `pred` mapped by the best similarity transform onto `gt`.
pub fn procrustes_align(pred: &Pose3D, gt: &Pose3D) -> Result<Pose3D> {
    check(pred, gt)?;
    let (p, g) = (to_f64(pred), to_f64(gt));
    let sim = similarity_fit(&p, &g)?;
    Ok(Pose3D(
        p.iter()
            .map(|x| {
                let y = sim.apply(x);
                [y.x as f32, y.y as f32, y.z as f32]
            })
            .collect(),
    ))
}

/// Mean per-joint error after similarity alignment, in mm. Alignment and
/// distances are computed in double precision.
pub fn p_mpjpe(pred: &Pose3D, gt: &Pose3D) -> Result<f64> {
    check(pred, gt)?;
    let (p, g) = (to_f64(pred), to_f64(gt));
    let sim = similarity_fit(&p, &g)?;
    Ok(p.iter()
        .zip(&g)
        .map(|(a, b)| (sim.apply(a) - b).norm() * 1000.0)
        .sum::<f64>()
        / p.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Mpjpe,
    PMpjpe,
}

fn nonempty(set: &HypothesisSet) -> Result<()> {
    if set.is_empty() {
        return Err(Error::Parameter(format!("hypothesis set {} is empty", set.source_id)));
    }
    Ok(())
}

/// Smallest metric value over the hypotheses.
pub fn min_over_hypotheses(set: &HypothesisSet, gt: &Pose3D, metric: Metric, root: usize) -> Result<f64> {
    nonempty(set)?;
    let mut best = f64::INFINITY;
    for h in &set.hypotheses {
        let v = match metric {
            Metric::Mpjpe => mpjpe(h, gt, root)?,
            Metric::PMpjpe => p_mpjpe(h, gt)?,
        };
        best = best.min(v);
    }
    Ok(best)
}

/// Index of the lowest-MPJPE hypothesis; ties go to the first.
pub fn best_hypothesis(set: &HypothesisSet, gt: &Pose3D, root: usize) -> Result<usize> {
    nonempty(set)?;
    let mut best = (0, f64::INFINITY);
    for (i, h) in set.hypotheses.iter().enumerate() {
        let v = mpjpe(h, gt, root)?;
        if v < best.1 {
            best = (i, v);
        }
    }
    Ok(best.0)
}

/// Percentage of joints with error below `threshold_mm`.
pub fn pck_pose(pred: &Pose3D, gt: &Pose3D, root: usize, threshold_mm: f64) -> Result<f64> {
    let e = joint_errors(pred, gt, root)?;
    Ok(100.0 * e.iter().filter(|&&v| v < threshold_mm).count() as f64 / e.len() as f64)
}

/// Number of 1 mm thresholds `tau in 1..=300` for which every joint error is
/// below `tau`; the rectangle-rule area under the all-joints-correct curve.
pub fn cps_pose(pred: &Pose3D, gt: &Pose3D, root: usize) -> Result<f64> {
    let worst = joint_errors(pred, gt, root)?.into_iter().fold(0.0, f64::max);
    Ok((1..=CPS_MAX_MM).filter(|&tau| worst < tau as f64).count() as f64)
}

/// How PCK and CPS reduce a hypothesis set to one number.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// Score of the lowest-MPJPE hypothesis.
    #[default]
    Best,
    /// Mean score over all hypotheses.
    Mean,
}

fn reduce(
    set: &HypothesisSet,
    gt: &Pose3D,
    root: usize,
    reduction: Reduction,
    f: impl Fn(&Pose3D) -> Result<f64>,
) -> Result<f64> {
    match reduction {
        Reduction::Best => f(&set.hypotheses[best_hypothesis(set, gt, root)?]),
        Reduction::Mean => {
            nonempty(set)?;
            let v = set.hypotheses.iter().map(&f).collect::<Result<Vec<_>>>()?;
            Ok(mean(&v))
        }
    }
}

pub fn pck(set: &HypothesisSet, gt: &Pose3D, root: usize, threshold_mm: f64, reduction: Reduction) -> Result<f64> {
    reduce(set, gt, root, reduction, |p| pck_pose(p, gt, root, threshold_mm))
}

pub fn cps(set: &HypothesisSet, gt: &Pose3D, root: usize, reduction: Reduction) -> Result<f64> {
    reduce(set, gt, root, reduction, |p| cps_pose(p, gt, root))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    pub mpjpe_mm: f64,
    pub p_mpjpe_mm: f64,
    pub pck_percent: f64,
    pub cps: f64,
}

/// All four metrics for one sample.
pub fn evaluate_set(set: &HypothesisSet, gt: &Pose3D, root: usize, reduction: Reduction) -> Result<SampleMetrics> {
    Ok(SampleMetrics {
        id: set.source_id.clone(),
        mpjpe_mm: min_over_hypotheses(set, gt, Metric::Mpjpe, root)?,
        p_mpjpe_mm: min_over_hypotheses(set, gt, Metric::PMpjpe, root)?,
        pck_percent: pck(set, gt, root, PCK_THRESHOLD_MM, reduction)?,
        cps: cps(set, gt, root, reduction)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub hypotheses: usize,
    pub reduction: Reduction,
    pub mpjpe_mm: f64,
    pub p_mpjpe_mm: f64,
    pub pck_percent: f64,
    pub cps: f64,
    pub samples: Vec<SampleMetrics>,
}

impl MetricReport {
    /// Means over samples, accumulated in sample order.
    pub fn aggregate(hypotheses: usize, reduction: Reduction, samples: Vec<SampleMetrics>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Data("no samples to report".into()));
        }
        let avg = |f: fn(&SampleMetrics) -> f64| samples.iter().map(f).sum::<f64>() / samples.len() as f64;
        Ok(MetricReport {
            hypotheses,
            reduction,
            mpjpe_mm: avg(|s| s.mpjpe_mm),
            p_mpjpe_mm: avg(|s| s.p_mpjpe_mm),
            pck_percent: avg(|s| s.pck_percent),
            cps: avg(|s| s.cps),
            samples,
        })
    }

    /// Aligned plain-text summary.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:>5} {:>10} {:>10} {:>8} {:>8}",
            "H", "MPJPE", "P-MPJPE", "PCK", "CPS"
        );
        let _ = writeln!(
            s,
            "{:>5} {:>10.2} {:>10.2} {:>8.2} {:>8.2}",
            self.hypotheses, self.mpjpe_mm, self.p_mpjpe_mm, self.pck_percent, self.cps
        );
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Rotation3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pose(v: &[[f32; 3]]) -> Pose3D {
        Pose3D(v.to_vec())
    }

    fn random_pose(rng: &mut impl Rng, j: usize) -> Pose3D {
        Pose3D(
            (0..j)
                .map(|_| {
                    [
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                    ]
                })
                .collect(),
        )
    }

    #[test]
    fn mpjpe_cases() {
        let gt = pose(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        assert_eq!(mpjpe(&gt, &gt, 0).unwrap(), 0.0);
        assert_eq!(mpjpe(&gt.translated([3.0, -1.0, 2.0]), &gt, 0).unwrap(), 0.0);
        let pred = pose(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.1]]);
        assert!((mpjpe(&pred, &gt, 0).unwrap() - 50.0).abs() < 1e-4);
        assert!(matches!(mpjpe(&pose(&[[0.0; 3]]), &gt, 0), Err(Error::Incompatible(_))));
    }

    #[test]
    fn procrustes_recovers_similarity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let gt = random_pose(&mut rng, 17);
        assert!(p_mpjpe(&gt, &gt).unwrap() < 1e-6);
        let rot = Rotation3::from_euler_angles(0.3, -1.2, 2.0);
        let moved = Pose3D(
            to_f64(&gt)
                .iter()
                .map(|x| {
                    let y = 1.7 * (rot * x) + Vector3::new(0.4, -2.0, 5.0);
                    [y.x as f32, y.y as f32, y.z as f32]
                })
                .collect(),
        );
        assert!(p_mpjpe(&moved, &gt).unwrap() < 1e-3);
        let sim = similarity_fit(&to_f64(&gt), &to_f64(&gt)).unwrap();
        assert!((sim.rotation - Matrix3::identity()).norm() < 1e-9 && (sim.scale - 1.0).abs() < 1e-9);
    }

    #[test]
    fn reflection_is_not_used() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let gt = random_pose(&mut rng, 10);
        let mirrored = Pose3D(gt.joints().iter().map(|j| [-j[0], j[1], j[2]]).collect());
        let sim = similarity_fit(&to_f64(&mirrored), &to_f64(&gt)).unwrap();
        assert!((sim.rotation.determinant() - 1.0).abs() < 1e-9);
        assert!(p_mpjpe(&mirrored, &gt).unwrap() > 1.0);
    }

    #[test]
    fn degenerate_pose_is_an_alignment_error() {
        let line = pose(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [3.0, 0.0, 0.0]]);
        let gt = pose(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        assert!(matches!(p_mpjpe(&line, &gt), Err(Error::Alignment(_))));
        let point = pose(&[[1.0, 1.0, 1.0]; 4]);
        assert!(matches!(p_mpjpe(&point, &gt), Err(Error::Alignment(_))));
    }

    #[test]
    fn alignment_is_idempotent_in_double_precision() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (p, g) = (to_f64(&random_pose(&mut rng, 17)), to_f64(&random_pose(&mut rng, 17)));
        let residual = |a: &[Vector3<f64>]| a.iter().zip(&g).map(|(x, y)| (x - y).norm()).sum::<f64>() * 1000.0;
        let sim = similarity_fit(&p, &g).unwrap();
        let once: Vec<_> = p.iter().map(|x| sim.apply(x)).collect();
        let sim2 = similarity_fit(&once, &g).unwrap();
        let twice: Vec<_> = once.iter().map(|x| sim2.apply(x)).collect();
        assert!((residual(&once) - residual(&twice)).abs() < 1e-9);
    }

    #[test]
    fn hypothesis_reductions() {
        let gt = pose(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
        let mut far = gt.clone();
        far.0[1][2] += 0.1;
        let mut near = gt.clone();
        near.0[1][2] += 0.01;
        let set = HypothesisSet::new("s", vec![far.clone(), near.clone()]).unwrap();
        let v = min_over_hypotheses(&set, &gt, Metric::Mpjpe, 0).unwrap();
        assert!((v - mpjpe(&near, &gt, 0).unwrap()).abs() < 1e-12);
        assert!((v - 10.0 / 3.0).abs() < 1e-4);
        assert_eq!(best_hypothesis(&set, &gt, 0).unwrap(), 1);
        let single = HypothesisSet::new("s", vec![far.clone()]).unwrap();
        assert_eq!(
            min_over_hypotheses(&single, &gt, Metric::Mpjpe, 0).unwrap(),
            mpjpe(&far, &gt, 0).unwrap()
        );
        let with_gt = HypothesisSet::new("s", vec![far, gt.clone()]).unwrap();
        assert_eq!(min_over_hypotheses(&with_gt, &gt, Metric::Mpjpe, 0).unwrap(), 0.0);
        let empty = HypothesisSet {
            source_id: "e".into(),
            hypotheses: vec![],
        };
        assert!(min_over_hypotheses(&empty, &gt, Metric::Mpjpe, 0).is_err());
    }

    #[test]
    fn pck_and_cps_cases() {
        let gt = Pose3D::zeros(4);
        let shifted = |mm: [f32; 4]| Pose3D(mm.iter().map(|&e| [0.0, 0.0, e / 1000.0]).collect());
        let one = |p: Pose3D| HypothesisSet::new("s", vec![p]).unwrap();
        let r = Reduction::Best;
        assert_eq!(pck(&one(gt.clone()), &gt, 0, 150.0, r).unwrap(), 100.0);
        assert_eq!(cps(&one(gt.clone()), &gt, 0, r).unwrap(), 300.0);
        // root stays at zero error; remaining joints carry the offsets
        assert_eq!(
            pck_pose(&shifted([0.0, 200.0, 200.0, 200.0]), &gt, 0, 150.0).unwrap(),
            25.0
        );
        let pose4 = shifted([0.0, 100.0, 200.0, 200.0]);
        assert_eq!(pck_pose(&pose4, &gt, 0, 150.0).unwrap(), 50.0);
        assert_eq!(cps_pose(&shifted([0.0, 100.0, 50.0, 20.0]), &gt, 0).unwrap(), 200.0);
        assert_eq!(cps_pose(&shifted([0.0, 300.0, 0.0, 0.0]), &gt, 0).unwrap(), 0.0);
        assert_eq!(cps_pose(&shifted([0.0, 450.0, 0.0, 0.0]), &gt, 0).unwrap(), 0.0);
        let set = HypothesisSet::new("s", vec![shifted([0.0, 100.0, 50.0, 20.0]), gt.clone()]).unwrap();
        assert_eq!(cps(&set, &gt, 0, Reduction::Best).unwrap(), 300.0);
        assert_eq!(cps(&set, &gt, 0, Reduction::Mean).unwrap(), 250.0);
    }

    #[test]
    fn report_table_has_every_metric_column() {
        let s = SampleMetrics {
            id: "a".into(),
            mpjpe_mm: 10.0,
            p_mpjpe_mm: 8.0,
            pck_percent: 90.0,
            cps: 250.0,
        };
        let r = MetricReport::aggregate(
            200,
            Reduction::Best,
            vec![s.clone(), SampleMetrics { mpjpe_mm: 20.0, ..s }],
        )
        .unwrap();
        assert_eq!(r.mpjpe_mm, 15.0);
        let t = r.table();
        for col in ["MPJPE", "P-MPJPE", "PCK", "CPS"] {
            assert!(t.contains(col));
        }
        let back: MetricReport = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        assert_eq!(back, r);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn metrics_ignore_joint_order(seed in 0u64..1000, shift in 0usize..17) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gt = random_pose(&mut rng, 17);
            let pred = random_pose(&mut rng, 17);
            let perm: Vec<usize> = (0..17).map(|i| (i + shift) % 17).collect();
            let permute = |p: &Pose3D| Pose3D(perm.iter().map(|&i| p.0[i]).collect());
            let root = 0;
            let proot = perm.iter().position(|&i| i == root).unwrap();
            let (a, b) = (permute(&pred), permute(&gt));
            prop_assert!((mpjpe(&pred, &gt, root).unwrap() - mpjpe(&a, &b, proot).unwrap()).abs() < 1e-9);
            prop_assert!((p_mpjpe(&pred, &gt).unwrap() - p_mpjpe(&a, &b).unwrap()).abs() < 1e-6);
            prop_assert_eq!(pck_pose(&pred, &gt, root, 150.0).unwrap(), pck_pose(&a, &b, proot, 150.0).unwrap());
            prop_assert_eq!(cps_pose(&pred, &gt, root).unwrap(), cps_pose(&a, &b, proot).unwrap());
        }

        #[test]
        fn min_is_monotone_when_appending(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gt = random_pose(&mut rng, 5);
            let mut hyps = Vec::new();
            let mut last = f64::INFINITY;
            for _ in 0..6 {
                hyps.push(random_pose(&mut rng, 5));
                let set = HypothesisSet::new("s", hyps.clone()).unwrap();
                let v = min_over_hypotheses(&set, &gt, Metric::Mpjpe, 0).unwrap();
                prop_assert!(v <= last);
                last = v;
            }
        }
    }
}
