//! Training objectives: confidence-weighted regression, motion BCE,
//! camera-attention forcing (and its KL variant), and the pairwise camera loss.

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::CameraVars;
use crate::pose::CameraPose;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// λ in the confidence term.
    pub lambda_conf: f64,
    pub w_conf: f64,
    pub w_motion: f64,
    pub w_attn: f64,
    pub w_cam: f64,
    /// Dynamicness above which camera attention is penalized.
    pub c: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_conf: 0.2, w_conf: 1.0, w_motion: 1.0, w_attn: 1.0, w_cam: 1.0, c: 0.5 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ws = [self.lambda_conf, self.w_conf, self.w_motion, self.w_attn, self.w_cam];
        if ws.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config("loss weights must be finite and nonnegative".into()));
        }
        if !(0.0..=1.0).contains(&self.c) {
            return Err(Error::Config(format!("C must lie in [0, 1], got {}", self.c)));
        }
        Ok(())
    }
}

/// `Σ_i ĉ_i ‖ŷ_i − y_i‖² − λ log ĉ_i`.
///
/// `conf` holds one value per point; `pred` and `target` hold `C` channels per
/// point laid out channel-major (`[C, n]` after flattening).
pub fn conf_regression_loss(t: &Tape, pred: Var, target: Var, conf: Var, lambda: f64) -> Result<Var> {
    let (ps, ts) = (t.shape(pred), t.shape(target));
    if ps != ts {
        return Err(Error::dim("conf_regression_loss", format!("pred {ps:?} vs target {ts:?}")));
    }
    let cv = t.value(conf);
    let n = cv.numel();
    let total: usize = ps.iter().product();
    if n == 0 || total % n != 0 {
        return Err(Error::dim("conf_regression_loss", format!("{total} values for {n} confidences")));
    }
    if let Some(bad) = cv.data().iter().find(|&&c| !(c >= 1.0)) {
        return Err(Error::contract(format!("confidence {bad} is below 1")));
    }
    let ch = total / n;
    let r = t.sub(pred, target)?;
    let sq = t.reshape(t.mul(r, r)?, &[ch, n])?;
    let per_point = t.row_sum(t.transpose(sq)?)?;
    let c = t.reshape(conf, &[n])?;
    let weighted = t.sum(t.mul(c, per_point)?);
    let reg = t.scale(t.sum(t.log(c)), lambda);
    t.sub(weighted, reg)
}

fn check_binary(target: &Tensor) -> Result<()> {
    if target.data().iter().any(|&m| m != 0.0 && m != 1.0) {
        return Err(Error::contract("motion target must be binary"));
    }
    Ok(())
}

/// Mean binary cross-entropy from logits.
pub fn motion_bce_loss(t: &Tape, logits: Var, target: &Tensor) -> Result<Var> {
    check_binary(target)?;
    t.bce_with_logits(logits, target)
}

/// Mean binary cross-entropy from probabilities clipped to `[1e-12, 1 − 1e-12]`.
pub fn motion_bce_from_probabilities(probs: &Tensor, target: &Tensor) -> Result<f64> {
    check_binary(target)?;
    if probs.shape() != target.shape() {
        return Err(Error::dim("motion_bce", format!("{:?} vs {:?}", probs.shape(), target.shape())));
    }
    let n = probs.numel() as f64;
    let s: f64 = probs
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &m)| {
            let p = p.clamp(1e-12, 1.0 - 1e-12);
            m * p.ln() + (1.0 - m) * (1.0 - p).ln()
        })
        .sum();
    Ok(-s / n)
}

fn check_distribution(alpha: &Tensor, scores: &[f64]) -> Result<()> {
    if alpha.numel() != scores.len() || scores.is_empty() {
        return Err(Error::dim("attention loss", format!("{} weights, {} scores", alpha.numel(), scores.len())));
    }
    let s: f64 = alpha.data().iter().sum();
    if (s - 1.0).abs() > 1e-6 || alpha.data().iter().any(|&a| a < 0.0) {
        return Err(Error::contract(format!("camera attention is not a distribution (sum {s})")));
    }
    Ok(())
}

/// `(1/M) Σ_i max(0, a_i − C) α_i` with `a` the per-token dynamicness.
pub fn attention_forcing_loss(t: &Tape, alpha: Var, dynamicness: &[f64], c: f64) -> Result<Var> {
    let av = t.value(alpha);
    check_distribution(&av, dynamicness)?;
    let m = dynamicness.len() as f64;
    let w: Vec<f64> = dynamicness.iter().map(|&a| (a - c).max(0.0) / m).collect();
    let w = t.constant(Tensor::new(av.shape().to_vec(), w)?);
    Ok(t.sum(t.mul(alpha, w)?))
}

/// `KL(p ‖ α)` with `p ∝ 1 − a`.
pub fn kl_alignment_loss(t: &Tape, alpha: Var, dynamicness: &[f64]) -> Result<Var> {
    let av = t.value(alpha);
    check_distribution(&av, dynamicness)?;
    let z: f64 = dynamicness.iter().map(|a| 1.0 - a).sum();
    if !(z > 0.0) {
        return Err(Error::contract("every token is fully dynamic; the static target is undefined"));
    }
    let support: Vec<usize> = (0..dynamicness.len()).filter(|&i| dynamicness[i] < 1.0).collect();
    let p: Vec<f64> = support.iter().map(|&i| (1.0 - dynamicness[i]) / z).collect();
    let entropy: f64 = p.iter().map(|pi| pi * pi.ln()).sum();
    let log_alpha = t.log(t.gather(alpha, &support)?);
    let cross = t.sum(t.mul(log_alpha, t.constant(Tensor::vector(p)))?);
    Ok(t.add_scalar(t.scale(cross, -1.0), entropy))
}

fn check_rotation(r: &Matrix3<f64>) -> Result<()> {
    let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
    if ortho > 1e-6 || (r.determinant() - 1.0).abs() > 1e-6 {
        return Err(Error::contract("matrix is not a proper rotation"));
    }
    Ok(())
}

/// `arccos(clamp((tr(R̂ᵀR) − 1)/2, −1, 1))`.
pub fn rotation_geodesic_angle(r_hat: &Matrix3<f64>, r: &Matrix3<f64>) -> Result<f64> {
    check_rotation(r_hat)?;
    check_rotation(r)?;
    let c = (((r_hat.transpose() * r).trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    Ok(c.acos())
}

/// Geodesic angle between two 3×3 rotation nodes, in the form
/// `atan2(‖vee(M − Mᵀ)‖/2, (tr M − 1)/2)` with `M = R̂ᵀR`, which has
/// well-behaved derivatives near 0 and π.
pub fn rotation_angle_tape(t: &Tape, r_hat: Var, r: Var) -> Result<Var> {
    let m = t.matmul(t.transpose(r_hat)?, r)?;
    let upper = t.gather(m, &[7, 2, 3])?;
    let lower = t.gather(m, &[5, 6, 1])?;
    let sin = t.scale(t.norm(t.sub(upper, lower)?), 0.5);
    let cos = t.scale(t.add_scalar(t.sum(t.gather(m, &[0, 4, 8])?), -1.0), 0.5);
    t.atan2(sin, cos)
}

/// Which pose of each pair carries gradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetachPolicy {
    /// The earlier pose of every pair is a constant in both ordered terms.
    StreamingPath,
    /// Both poses carry gradient.
    RefinedPath,
}

/// Rotation (3×3) and translation (1×3) nodes of a predicted pose.
#[derive(Clone, Copy, Debug)]
pub struct PoseVar {
    pub rot: Var,
    pub trans: Var,
}

impl From<CameraVars> for PoseVar {
    fn from(c: CameraVars) -> Self {
        PoseVar { rot: c.rot, trans: c.trans }
    }
}

impl From<&CameraVars> for PoseVar {
    fn from(c: &CameraVars) -> Self {
        PoseVar { rot: c.rot, trans: c.trans }
    }
}

fn matrix_tensor(m: &Matrix3<f64>) -> Tensor {
    let mut data = Vec::with_capacity(9);
    for i in 0..3 {
        for j in 0..3 {
            data.push(m[(i, j)]);
        }
    }
    Tensor::new(vec![3, 3], data).expect("3x3")
}

/// `1/(T(T−1)) Σ_{i≠j} θ(R̂_ij, R_ij) + ‖t̂_ij − t_ij‖` over relative
/// transforms `T_i⁻¹ T_j`.
pub fn camera_loss(t: &Tape, pred: &[PoseVar], gt: &[CameraPose], policy: DetachPolicy) -> Result<Var> {
    let n = pred.len();
    if n != gt.len() {
        return Err(Error::dim("camera_loss", format!("{n} predictions, {} targets", gt.len())));
    }
    if n < 2 {
        return Err(Error::contract("camera_loss needs at least two frames"));
    }
    let detached: Vec<PoseVar> = pred
        .iter()
        .map(|p| PoseVar { rot: t.stop_gradient(p.rot), trans: t.stop_gradient(p.trans) })
        .collect();
    let mut terms = Vec::with_capacity(n * (n - 1));
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let pick = |k: usize| match policy {
                DetachPolicy::StreamingPath if k == i.min(j) => detached[k],
                _ => pred[k],
            };
            let (pi, pj) = (pick(i), pick(j));
            let rel_r = t.matmul(t.transpose(pi.rot)?, pj.rot)?;
            let rel_t = t.matmul(t.sub(pj.trans, pi.trans)?, pi.rot)?;
            let g = gt[i].relative(&gt[j]);
            let gr = t.constant(matrix_tensor(&g.rotation_matrix()));
            let gt_t = t.constant(Tensor::new(vec![1, 3], g.translation.iter().copied().collect())?);
            let angle = rotation_angle_tape(t, rel_r, gr)?;
            let dist = t.norm(t.sub(rel_t, gt_t)?);
            terms.push(t.add(angle, dist)?);
        }
    }
    let mut acc = terms[0];
    for &x in &terms[1..] {
        acc = t.add(acc, x)?;
    }
    Ok(t.scale(acc, 1.0 / (n * (n - 1)) as f64))
}

/// Plain evaluation of [`camera_loss`] on fixed poses.
pub fn camera_loss_value(pred: &[CameraPose], gt: &[CameraPose]) -> Result<f64> {
    let t = Tape::new();
    let vars: Vec<PoseVar> = pred
        .iter()
        .map(|p| -> Result<PoseVar> {
            Ok(PoseVar {
                rot: t.constant(matrix_tensor(&p.rotation_matrix())),
                trans: t.constant(Tensor::new(vec![1, 3], p.translation.iter().copied().collect())?),
            })
        })
        .collect::<Result<_>>()?;
    let l = camera_loss(&t, &vars, gt, DetachPolicy::RefinedPath)?;
    Ok(t.scalar_value(l))
}

/// Individual loss nodes of one training step. Absent terms count as zero.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossTerms {
    pub conf_depth: Option<Var>,
    pub conf_point: Option<Var>,
    pub motion: Option<Var>,
    pub attn: Option<Var>,
    pub cam_stream: Option<Var>,
    pub cam_refined: Option<Var>,
}

/// Scalar values of each term, in CSV column order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub conf_depth: f64,
    pub conf_point: f64,
    pub motion: f64,
    pub attn: f64,
    pub cam_stream: f64,
    pub cam_refined: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub const CSV_HEADER: &'static str = "step,L_conf_depth,L_conf_point,L_motion,L_attn,L_cam_stream,L_cam_refined,total";

    pub fn csv_row(&self, step: usize) -> String {
        format!(
            "{step},{},{},{},{},{},{},{}",
            self.conf_depth, self.conf_point, self.motion, self.attn, self.cam_stream, self.cam_refined, self.total
        )
    }
}

/// `w_conf (L_depth + L_point) + w_motion L_motion + w_attn L_attn + w_cam (L_stream + L_refined)`.
pub fn total_loss(t: &Tape, terms: &LossTerms, w: &LossWeights) -> Result<(Var, LossBreakdown)> {
    w.validate()?;
    let val = |v: Option<Var>| v.map_or(0.0, |v| t.scalar_value(v));
    let weighted = [
        (terms.conf_depth, w.w_conf),
        (terms.conf_point, w.w_conf),
        (terms.motion, w.w_motion),
        (terms.attn, w.w_attn),
        (terms.cam_stream, w.w_cam),
        (terms.cam_refined, w.w_cam),
    ];
    let mut acc = t.constant(Tensor::scalar(0.0));
    for (v, wt) in weighted {
        if let Some(v) = v {
            acc = t.add(acc, t.scale(v, wt))?;
        }
    }
    let breakdown = LossBreakdown {
        conf_depth: val(terms.conf_depth),
        conf_point: val(terms.conf_point),
        motion: val(terms.motion),
        attn: val(terms.attn),
        cam_stream: val(terms.cam_stream),
        cam_refined: val(terms.cam_refined),
        total: t.scalar_value(acc),
    };
    Ok((acc, breakdown))
}
