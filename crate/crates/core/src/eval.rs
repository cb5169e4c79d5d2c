//! Trajectory and depth metrics.

use std::fmt::Write as _;

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::pose::CameraPose;
use crate::tensor::Tensor;

/// Poses with strictly increasing timestamps.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub timestamps: Vec<f64>,
    pub poses: Vec<CameraPose>,
}

impl Trajectory {
    pub fn new(timestamps: Vec<f64>, poses: Vec<CameraPose>) -> Result<Self> {
        if timestamps.len() != poses.len() {
            return Err(Error::dim("Trajectory", format!("{} stamps, {} poses", timestamps.len(), poses.len())));
        }
        if timestamps.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::contract("trajectory timestamps must be strictly increasing"));
        }
        Ok(Trajectory { timestamps, poses })
    }

    /// Frame index as timestamp.
    pub fn from_poses(poses: Vec<CameraPose>) -> Self {
        let timestamps = (0..poses.len()).map(|i| i as f64).collect();
        Trajectory { timestamps, poses }
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn centers(&self) -> Vec<Vector3<f64>> {
        self.poses.iter().map(CameraPose::center).collect()
    }

    /// Parses `timestamp tx ty tz qx qy qz qw` lines; `#` starts a comment.
    pub fn from_tum(text: &str) -> Result<Self> {
        let mut stamps = Vec::new();
        let mut poses = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let v: Vec<f64> = line
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Format(format!("line {}: {e}", n + 1)))?;
            if v.len() != 8 {
                return Err(Error::Format(format!("line {}: expected 8 fields, got {}", n + 1, v.len())));
            }
            stamps.push(v[0]);
            poses.push(CameraPose::from_wxyz([v[7], v[4], v[5], v[6]], [v[1], v[2], v[3]]));
        }
        Trajectory::new(stamps, poses)
    }

    pub fn to_tum(&self) -> String {
        let mut s = String::new();
        for (ts, p) in self.timestamps.iter().zip(&self.poses) {
            let q = p.quat_wxyz();
            let t = p.translation;
            writeln!(s, "{ts} {} {} {} {} {} {} {}", t.x, t.y, t.z, q[1], q[2], q[3], q[0]).unwrap();
        }
        s
    }

    /// Applies the world similarity `x ↦ s R x + t` to every pose.
    pub fn transformed(&self, sim: &Sim3) -> Trajectory {
        Trajectory {
            timestamps: self.timestamps.clone(),
            poses: self.poses.iter().map(|p| p.similarity(sim.scale, &sim.rotation, &sim.translation)).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sim3 {
    pub scale: f64,
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Sim3 {
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rotation * p) + self.translation
    }
}

fn check_pair(est: &Trajectory, gt: &Trajectory) -> Result<()> {
    if est.len() != gt.len() {
        return Err(Error::dim("trajectory pair", format!("{} vs {} poses", est.len(), gt.len())));
    }
    if est.timestamps.iter().zip(&gt.timestamps).any(|(a, b)| (a - b).abs() > 1e-9) {
        return Err(Error::contract("trajectory timestamps do not match"));
    }
    Ok(())
}

/// Least-squares similarity mapping estimated camera centers onto ground truth.
pub fn sim3_align(est: &Trajectory, gt: &Trajectory) -> Result<Sim3> {
    check_pair(est, gt)?;
    if est.len() < 3 {
        return Err(Error::contract("Sim(3) alignment needs at least three poses"));
    }
    let (x, y) = (est.centers(), gt.centers());
    let n = x.len() as f64;
    let mx = x.iter().sum::<Vector3<f64>>() / n;
    let my = y.iter().sum::<Vector3<f64>>() / n;
    let var_x = x.iter().map(|p| (p - mx).norm_squared()).sum::<f64>() / n;
    let mut cov = Matrix3::zeros();
    for (a, b) in x.iter().zip(&y) {
        cov += (b - my) * (a - mx).transpose();
    }
    cov /= n;
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut sv = svd.singular_values;
    // Collinear or coincident centers leave at most one nonzero singular value.
    let mut sorted: Vec<f64> = sv.iter().copied().collect();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    if var_x <= 1e-300 || sorted[1] <= 1e-12 * sorted[0].max(1e-300) {
        return Err(Error::RankDeficient("camera centers are collinear or coincident".into()));
    }
    let mut s = Matrix3::identity();
    if (u.determinant() * v_t.determinant()) < 0.0 {
        // Flip the axis of the smallest singular value.
        let (imin, _) = sv.iter().enumerate().fold((0, f64::INFINITY), |b, (i, &v)| if v < b.1 { (i, v) } else { b });
        s[(imin, imin)] = -1.0;
        sv[imin] = -sv[imin];
    }
    let r = u * s * v_t;
    let scale = sv.sum() / var_x;
    let translation = my - scale * (r * mx);
    let rot = nalgebra::Rotation3::from_matrix_unchecked(r);
    Ok(Sim3 { scale, rotation: UnitQuaternion::from_rotation_matrix(&rot), translation })
}

/// RMSE of camera-center distances.
pub fn ate(est_aligned: &Trajectory, gt: &Trajectory) -> Result<f64> {
    check_pair(est_aligned, gt)?;
    if gt.is_empty() {
        return Err(Error::contract("empty trajectory"));
    }
    let se: f64 = est_aligned.centers().iter().zip(gt.centers()).map(|(a, b)| (a - b).norm_squared()).sum();
    Ok((se / gt.len() as f64).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Rpe {
    pub trans: f64,
    /// Degrees.
    pub rot: f64,
}

/// RMSE of relative-motion errors over every `(i, i + Δ)` pair.
pub fn rpe(est: &Trajectory, gt: &Trajectory, delta: usize) -> Result<Rpe> {
    check_pair(est, gt)?;
    if delta == 0 || delta >= gt.len() {
        return Err(Error::contract(format!("frame delta {delta} invalid for {} poses", gt.len())));
    }
    let (mut st, mut sr) = (0.0, 0.0);
    let pairs = gt.len() - delta;
    for i in 0..pairs {
        let e = est.poses[i].relative(&est.poses[i + delta]);
        let g = gt.poses[i].relative(&gt.poses[i + delta]);
        let err = g.relative(&e);
        st += err.translation.norm_squared();
        sr += err.rotation.angle().to_degrees().powi(2);
    }
    Ok(Rpe { trans: (st / pairs as f64).sqrt(), rot: (sr / pairs as f64).sqrt() })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrajectoryReport {
    #[serde(rename = "ATE")]
    pub ate: f64,
    #[serde(rename = "RPE_trans")]
    pub rpe_trans: f64,
    #[serde(rename = "RPE_rot")]
    pub rpe_rot: f64,
    pub scale: f64,
}

/// Aligns `est` to `gt`, then reports ATE and RPE on the aligned estimate.
pub fn evaluate_trajectory(est: &Trajectory, gt: &Trajectory, delta: usize) -> Result<TrajectoryReport> {
    let sim = sim3_align(est, gt)?;
    let aligned = est.transformed(&sim);
    let r = rpe(&aligned, gt, delta)?;
    Ok(TrajectoryReport { ate: ate(&aligned, gt)?, rpe_trans: r.trans, rpe_rot: r.rot, scale: sim.scale })
}

fn depth_pairs<'a>(pred: &'a Tensor, gt: &'a Tensor, valid: Option<&'a Tensor>) -> Result<Vec<(f64, f64)>> {
    if pred.shape() != gt.shape() || valid.is_some_and(|v| v.shape() != gt.shape()) {
        return Err(Error::dim("depth metrics", format!("{:?} vs {:?}", pred.shape(), gt.shape())));
    }
    let pairs: Vec<(f64, f64)> = (0..gt.numel())
        .filter(|&i| valid.is_none_or(|v| v.data()[i] != 0.0) && gt.data()[i] > 0.0)
        .map(|i| (pred.data()[i], gt.data()[i]))
        .collect();
    if pairs.is_empty() {
        return Err(Error::contract("no valid depth pixels"));
    }
    Ok(pairs)
}

/// Multiplies `pred` by `s* = Σ gt·pred / Σ pred²` over valid pixels.
pub fn scale_align_depth(pred: &Tensor, gt: &Tensor, valid: Option<&Tensor>) -> Result<(Tensor, f64)> {
    let pairs = depth_pairs(pred, gt, valid)?;
    let num: f64 = pairs.iter().map(|(p, g)| p * g).sum();
    let den: f64 = pairs.iter().map(|(p, _)| p * p).sum();
    if !(den > 0.0) {
        return Err(Error::contract("prediction is zero on every valid pixel"));
    }
    let s = num / den;
    Ok((pred.scale(s), s))
}

/// Mean `|pred − gt| / gt` over valid pixels.
pub fn abs_rel(pred: &Tensor, gt: &Tensor, valid: Option<&Tensor>) -> Result<f64> {
    let pairs = depth_pairs(pred, gt, valid)?;
    Ok(pairs.iter().map(|(p, g)| (p - g).abs() / g).sum::<f64>() / pairs.len() as f64)
}

/// Fraction of valid pixels with `max(pred/gt, gt/pred) < τ`.
pub fn delta_accuracy(pred: &Tensor, gt: &Tensor, valid: Option<&Tensor>, tau: f64) -> Result<f64> {
    let pairs = depth_pairs(pred, gt, valid)?;
    let hits = pairs
        .iter()
        .filter(|(p, g)| *p > 0.0 && (p / g).max(g / p) < tau)
        .count();
    Ok(hits as f64 / pairs.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DepthReport {
    pub abs_rel: f64,
    pub delta_1_25: f64,
    pub scale: f64,
}

pub fn evaluate_depth(pred: &Tensor, gt: &Tensor, valid: Option<&Tensor>, align: bool) -> Result<DepthReport> {
    let (p, scale) = if align { scale_align_depth(pred, gt, valid)? } else { (pred.clone(), 1.0) };
    Ok(DepthReport { abs_rel: abs_rel(&p, gt, valid)?, delta_1_25: delta_accuracy(&p, gt, valid, 1.25)?, scale })
}

/// Rotation and translation-direction errors (degrees) of every pair `i < j`.
pub fn pair_errors(est: &[CameraPose], gt: &[CameraPose]) -> Result<Vec<(f64, f64)>> {
    if est.len() != gt.len() || est.len() < 2 {
        return Err(Error::contract("pair errors need two equal-length sequences of at least two poses"));
    }
    let mut out = Vec::new();
    for i in 0..est.len() {
        for j in i + 1..est.len() {
            let e = est[i].relative(&est[j]);
            let g = gt[i].relative(&gt[j]);
            let rot = e.rotation.angle_to(&g.rotation).to_degrees();
            let (a, b) = (e.translation, g.translation);
            let trans = if a.norm() == 0.0 || b.norm() == 0.0 {
                if a.norm() == b.norm() { 0.0 } else { 180.0 }
            } else {
                (a.dot(&b) / (a.norm() * b.norm())).clamp(-1.0, 1.0).acos().to_degrees()
            };
            out.push((rot, trans));
        }
    }
    Ok(out)
}

/// Fractions of pairs with rotation / translation-direction error below `tau` degrees.
pub fn rra_rta(errors: &[(f64, f64)], tau: f64) -> (f64, f64) {
    let n = errors.len() as f64;
    let rra = errors.iter().filter(|e| e.0 < tau).count() as f64 / n;
    let rta = errors.iter().filter(|e| e.1 < tau).count() as f64 / n;
    (rra, rta)
}

/// Accuracy of `max(rot, trans)` error under each integer threshold `1..=max_tau`.
pub fn accuracy_curve(errors: &[(f64, f64)], max_tau: usize) -> Vec<f64> {
    let n = errors.len() as f64;
    (1..=max_tau)
        .map(|tau| errors.iter().filter(|e| e.0.max(e.1) < tau as f64).count() as f64 / n)
        .collect()
}

/// Trapezoidal area under an accuracy curve sampled at unit spacing,
/// normalized by its span.
pub fn auc(curve: &[f64]) -> Result<f64> {
    if curve.len() < 2 {
        return Err(Error::contract("AUC needs at least two thresholds"));
    }
    let area: f64 = curve.windows(2).map(|w| (w[0] + w[1]) / 2.0).sum();
    Ok(area / (curve.len() - 1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng;

    fn random_traj(n: usize, seed: u64) -> Trajectory {
        let mut rng = seeded(seed);
        Trajectory::from_poses(
            (0..n)
                .map(|_| {
                    let q = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
                    let t = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
                    CameraPose::from_wxyz(q, t)
                })
                .collect(),
        )
    }

    #[test]
    fn identical_trajectories_have_zero_error() {
        let t = random_traj(6, 1);
        let r = evaluate_trajectory(&t, &t, 1).unwrap();
        assert!(r.ate < 1e-12 && r.rpe_trans < 1e-12 && r.rpe_rot < 1e-6);
        let sim = sim3_align(&t, &t).unwrap();
        assert!((sim.scale - 1.0).abs() < 1e-12);
        assert!(sim.rotation.angle() < 1e-9 && sim.translation.norm() < 1e-9);
    }

    #[test]
    fn doubled_estimate_recovers_half_scale() {
        let gt = random_traj(5, 2);
        let est = gt.transformed(&Sim3 { scale: 2.0, rotation: UnitQuaternion::identity(), translation: Vector3::zeros() });
        assert!((sim3_align(&est, &gt).unwrap().scale - 0.5).abs() < 1e-12);
    }

    #[test]
    fn collinear_centers_are_rank_deficient() {
        let poses = (0..4).map(|i| CameraPose::from_wxyz([1.0, 0.0, 0.0, 0.0], [i as f64, 0.0, 0.0])).collect();
        let t = Trajectory::from_poses(poses);
        assert!(matches!(sim3_align(&t, &t), Err(Error::RankDeficient(_))));
    }

    #[test]
    fn ate_hand_case() {
        let gt = Trajectory::from_poses((0..4).map(|i| CameraPose::from_wxyz([1.0, 0.0, 0.0, 0.0], [i as f64, 0.0, 0.0])).collect());
        let offs = [0.0, 1.0, 0.0, 2.0];
        let est = Trajectory::from_poses(
            (0..4).map(|i| CameraPose::from_wxyz([1.0, 0.0, 0.0, 0.0], [i as f64, offs[i], 0.0])).collect(),
        );
        assert!((ate(&est, &gt).unwrap() - (5.0f64 / 4.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn rpe_full_span_is_single_pair() {
        let gt = random_traj(5, 3);
        let est = random_traj(5, 4);
        let r = rpe(&est, &gt, 4).unwrap();
        let err = gt.poses[0].relative(&gt.poses[4]).relative(&est.poses[0].relative(&est.poses[4]));
        assert!((r.trans - err.translation.norm()).abs() < 1e-12);
        assert!((r.rot - err.rotation.angle().to_degrees()).abs() < 1e-9);
    }

    #[test]
    fn tum_round_trip() {
        let t = random_traj(3, 5);
        let back = Trajectory::from_tum(&t.to_tum()).unwrap();
        for (a, b) in t.poses.iter().zip(&back.poses) {
            assert!(a.rotation.angle_to(&b.rotation) < 1e-12);
            assert!((a.translation - b.translation).norm() < 1e-12);
        }
        assert!(Trajectory::from_tum("0 1 2 3\n").is_err());
        assert!(Trajectory::new(vec![1.0, 1.0], vec![CameraPose::identity(); 2]).is_err());
    }

    #[test]
    fn depth_metric_cases() {
        let gt = Tensor::random_uniform(&[4, 4], 1.0, 5.0, &mut seeded(6));
        let r = evaluate_depth(&gt, &gt, None, false).unwrap();
        assert_eq!((r.abs_rel, r.delta_1_25), (0.0, 1.0));
        let twice = gt.scale(2.0);
        assert!(evaluate_depth(&twice, &gt, None, true).unwrap().abs_rel < 1e-12);
        let far = gt.scale(1.3);
        assert_eq!(delta_accuracy(&far, &gt, None, 1.25).unwrap(), 0.0);
        assert_eq!(delta_accuracy(&gt, &far, None, 1.25).unwrap(), 0.0);
        assert_eq!(evaluate_depth(&far, &gt, None, true).unwrap().delta_1_25, 1.0);
    }

    #[test]
    fn auc_bounds() {
        let poses = random_traj(4, 7).poses;
        let e = pair_errors(&poses, &poses).unwrap();
        assert_eq!(rra_rta(&e, 30.0), (1.0, 1.0));
        assert_eq!(auc(&accuracy_curve(&e, 30)).unwrap(), 1.0);
        let bad = vec![(40.0, 0.0); 3];
        assert_eq!(auc(&accuracy_curve(&bad, 30)).unwrap(), 0.0);
    }
}
