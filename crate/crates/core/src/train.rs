//! Toy training loop over generated scenes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::Serialize;

use crate::autodiff::{Tape, Var};
use crate::config::{AttentionLossKind, AttentionScope, OptimizerKind, RunConfig, SupervisedLayers, TrainConfig};
use crate::error::{Error, Result};
use crate::layout::{FrameLayout, MaskOptions};
use crate::losses::{
    attention_forcing_loss, camera_loss, conf_regression_loss, kl_alignment_loss, motion_bce_loss, total_loss,
    DetachPolicy, LossBreakdown, LossTerms, PoseVar,
};
use crate::model::{forward_batch, forward_batch_tape, BatchOptions, Params};
use crate::motion::{motion_score, Polarity};
use crate::pose::CameraPose;
use crate::rng::{derive, seeded};
use crate::scene::{generate, PatchEmbed, Scene, SceneSpec};
use crate::tensor::Tensor;

/// Adam (with optional decoupled weight decay) or plain SGD.
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step: i32,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Optimizer {
    pub fn new(cfg: &TrainConfig) -> Self {
        Optimizer {
            kind: cfg.optimizer,
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn update(&mut self, params: &mut Params, grads: &BTreeMap<String, Tensor>) {
        self.update_with_lr(params, grads, self.lr);
    }

    pub fn update_with_lr(&mut self, params: &mut Params, grads: &BTreeMap<String, Tensor>, lr: f64) {
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let (c1, c2) = (1.0 - b1.powi(self.step), 1.0 - b2.powi(self.step));
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let data = p.data_mut();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (x, gi) in data.iter_mut().zip(g.data()) {
                        *x -= lr * (gi + self.weight_decay * *x);
                    }
                }
                OptimizerKind::Adam => {
                    let m = self.m.entry(name.to_string()).or_insert_with(|| vec![0.0; g.numel()]);
                    let v = self.v.entry(name.to_string()).or_insert_with(|| vec![0.0; g.numel()]);
                    for i in 0..data.len() {
                        let gi = g.data()[i];
                        m[i] = b1 * m[i] + (1.0 - b1) * gi;
                        v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                        let step = (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                        data[i] -= lr * (step + self.weight_decay * data[i]);
                    }
                }
            }
        }
    }
}

/// One generated scene prepared for training or evaluation.
pub struct PreparedScene {
    pub scene: Scene,
    pub tokens: Vec<Tensor>,
    /// Per frame, per patch token dynamicness.
    pub dynamicness: Vec<Vec<f64>>,
}

impl PreparedScene {
    pub fn new(scene: Scene, embed: &PatchEmbed) -> Result<Self> {
        let s = scene.spec.patch_size;
        let tokens = scene.frames.iter().map(|f| embed.tokenize(&f.pixels)).collect::<Result<_>>()?;
        let dynamicness = scene
            .frames
            .iter()
            .map(|f| Ok(motion_score(&f.motion_mask, s, Polarity::DynamicHigh)?.values))
            .collect::<Result<_>>()?;
        Ok(PreparedScene { scene, tokens, dynamicness })
    }

    pub fn poses(&self, start: usize, len: usize) -> Vec<CameraPose> {
        self.scene.frames[start..start + len].iter().map(|f| f.pose.clone()).collect()
    }

    /// World points of frame `t` in the camera frame of clip frame `start`, `[3, H, W]`.
    fn points_in(&self, t: usize, start: usize) -> Result<Tensor> {
        let reference = self.scene.frames[start].pose.inverse();
        let wp = &self.scene.frames[t].world_points;
        let n = wp.numel() / 3;
        let mut out = vec![0.0; 3 * n];
        for i in 0..n {
            let x = nalgebra::Vector3::new(wp.data()[i], wp.data()[n + i], wp.data()[2 * n + i]);
            let p = reference.transform_point(&x);
            for ch in 0..3 {
                out[ch * n + i] = p[ch];
            }
        }
        Tensor::new(wp.shape().to_vec(), out)
    }
}

/// Scene variants used for training; variant 0 is the configured scene itself.
pub fn scene_variants(cfg: &RunConfig) -> Result<Vec<PreparedScene>> {
    let embed = PatchEmbed::new(cfg.model.patch_size, cfg.model.d_model, cfg.embed_seed);
    let mut rng = derive(cfg.seed, 3);
    let mut out = Vec::with_capacity(cfg.train.scene_variants);
    for v in 0..cfg.train.scene_variants {
        let mut spec: SceneSpec = cfg.scene.clone();
        if v > 0 {
            spec.seed = cfg.scene.seed.wrapping_add(v as u64);
            for o in &mut spec.objects {
                o.center[0] += rng.random_range(-0.3..0.3);
                o.center[1] += rng.random_range(-0.3..0.3);
                let gain = rng.random_range(0.5..1.5);
                o.velocity.iter_mut().for_each(|x| *x *= gain);
            }
        }
        out.push(PreparedScene::new(generate(&spec)?, &embed)?);
    }
    Ok(out)
}

/// Patch tokens supervised for the camera query of `frame`, as `(column, frame, patch)`.
/// `CurrentFrame` keeps the frame's own visible patches and falls back to
/// every visible patch when there are none (flat causal ordering).
fn supervised_patches(
    layout: &FrameLayout,
    opts: &MaskOptions,
    scope: AttentionScope,
    frame: usize,
) -> Vec<(usize, usize, usize)> {
    let q = layout.camera_token(frame);
    let mut out = Vec::new();
    for f in 0..=frame {
        for p in 0..layout.patch_tokens() {
            let k = layout.patch_token(f, p);
            if opts.visible(layout, q, k) {
                out.push((k, f, p));
            }
        }
    }
    if scope == AttentionScope::CurrentFrame && out.iter().any(|&(_, f, _)| f == frame) {
        out.retain(|&(_, f, _)| f == frame);
    }
    out
}

fn attention_term(
    t: &Tape,
    heads: &[Var],
    n: usize,
    layout: &FrameLayout,
    opts: &MaskOptions,
    dynamicness: &[&[f64]],
    cfg: &RunConfig,
) -> Result<Var> {
    let mut mean = heads[0];
    for &h in &heads[1..] {
        mean = t.add(mean, h)?;
    }
    let mean = t.scale(mean, 1.0 / heads.len() as f64);
    let mut per_frame = Vec::with_capacity(layout.num_frames);
    for f in 0..layout.num_frames {
        let vis = supervised_patches(layout, opts, cfg.train.attention_scope, f);
        if vis.is_empty() {
            continue;
        }
        let row = layout.camera_token(f);
        let idx: Vec<usize> = vis.iter().map(|(k, _, _)| row * n + k).collect();
        let a: Vec<f64> = vis.iter().map(|&(_, fr, p)| dynamicness[fr][p]).collect();
        let g = t.gather(mean, &idx)?;
        let alpha = t.div_by_scalar(g, t.sum(g))?;
        per_frame.push(match cfg.train.attention_loss {
            AttentionLossKind::Hinge => attention_forcing_loss(t, alpha, &a, cfg.loss.c)?,
            AttentionLossKind::Kl => kl_alignment_loss(t, alpha, &a)?,
        });
    }
    if per_frame.is_empty() {
        return Ok(t.constant(Tensor::scalar(0.0)));
    }
    mean_of(t, &per_frame)
}

fn mean_of(t: &Tape, xs: &[Var]) -> Result<Var> {
    let mut acc = xs[0];
    for &x in &xs[1..] {
        acc = t.add(acc, x)?;
    }
    Ok(t.scale(acc, 1.0 / xs.len() as f64))
}

/// Builds the full training objective for one clip on `t`.
pub fn clip_objective(
    t: &Tape,
    params: &Params,
    cfg: &RunConfig,
    data: &PreparedScene,
    start: usize,
    len: usize,
) -> Result<(Var, LossBreakdown, BTreeMap<String, Var>)> {
    let pv = params.on_tape(t);
    let tokens = &data.tokens[start..start + len];
    let opts = BatchOptions { mask: cfg.stream.mask_options(), refinement: cfg.train.dual_path };
    let out = forward_batch_tape(t, params, &pv, tokens, &opts)?;
    let frames = &data.scene.frames[start..start + len];
    let pixels = (cfg.model.image_height * cfg.model.image_width) as f64;
    let conf_scale = if cfg.train.normalize_conf { 1.0 / pixels } else { 1.0 };

    let (mut depth, mut point, mut motion) = (Vec::new(), Vec::new(), Vec::new());
    for (i, f) in frames.iter().enumerate() {
        let d = &out.dense[i];
        let gt_depth = t.constant(f.depth.clone());
        let l = conf_regression_loss(t, d.depth, gt_depth, d.confidence, cfg.loss.lambda_conf)?;
        depth.push(t.scale(l, conf_scale));
        let gt_points = t.constant(data.points_in(start + i, start)?);
        let l = conf_regression_loss(t, d.points, gt_points, d.confidence, cfg.loss.lambda_conf)?;
        point.push(t.scale(l, conf_scale));
        motion.push(motion_bce_loss(t, d.motion_logits, &f.motion_mask)?);
    }

    let n = t.shape(out.attention[0][0])[0];
    let dyn_refs: Vec<&[f64]> = data.dynamicness[start..start + len].iter().map(Vec::as_slice).collect();
    let layers: Vec<usize> = match cfg.train.supervised_layers {
        SupervisedLayers::Last => vec![out.attention.len() - 1],
        SupervisedLayers::All => (0..out.attention.len()).collect(),
    };
    let attn_terms = layers
        .iter()
        .map(|&l| attention_term(t, &out.attention[l], n, &out.layout, &opts.mask, &dyn_refs, cfg))
        .collect::<Result<Vec<_>>>()?;

    let gt = data.poses(start, len);
    let stream_poses: Vec<PoseVar> = out.cameras.iter().map(PoseVar::from).collect();
    let cam_stream = camera_loss(t, &stream_poses, &gt, DetachPolicy::StreamingPath)?;
    let cam_refined = if cfg.train.dual_path {
        let refined: Vec<PoseVar> = out.refined.iter().map(PoseVar::from).collect();
        Some(camera_loss(t, &refined, &gt, DetachPolicy::RefinedPath)?)
    } else {
        None
    };

    let terms = LossTerms {
        conf_depth: Some(mean_of(t, &depth)?),
        conf_point: Some(mean_of(t, &point)?),
        motion: Some(mean_of(t, &motion)?),
        attn: Some(mean_of(t, &attn_terms)?),
        cam_stream: Some(cam_stream),
        cam_refined,
    };
    let (total, breakdown) = total_loss(t, &terms, &cfg.loss)?;
    let vars = pv.iter().map(|(k, v)| (k.to_string(), v)).collect();
    Ok((total, breakdown, vars))
}

/// Head-averaged last-layer camera attention split into dynamic (any moving
/// pixel in the patch) and static image tokens.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttentionSnapshot {
    pub step: usize,
    pub dynamic_mass: f64,
    pub static_mass: f64,
    pub ratio: f64,
    /// Per frame: renormalized attention over the supervised patch tokens.
    pub rows: Vec<Vec<f64>>,
    /// Dynamicness of the same tokens.
    pub dynamicness: Vec<Vec<f64>>,
}

pub fn attention_snapshot(
    params: &Params,
    cfg: &RunConfig,
    data: &PreparedScene,
    len: usize,
    step: usize,
) -> Result<AttentionSnapshot> {
    let opts = BatchOptions { mask: cfg.stream.mask_options(), refinement: false };
    let out = forward_batch(params, &data.tokens[..len], &opts)?;
    let mean = out.attention.head_mean(out.attention.layers.len() - 1)?;
    let (mut dm, mut sm) = (0.0, 0.0);
    let (mut rows, mut dyns) = (Vec::new(), Vec::new());
    let mut counted = 0;
    for f in 0..len {
        let vis = supervised_patches(&out.layout, &opts.mask, cfg.train.attention_scope, f);
        if vis.is_empty() {
            continue;
        }
        counted += 1;
        let q = out.layout.camera_token(f);
        let raw: Vec<f64> = vis.iter().map(|&(k, _, _)| mean.at(q, k)).collect();
        let z: f64 = raw.iter().sum();
        let row: Vec<f64> = raw.iter().map(|v| v / z).collect();
        let a: Vec<f64> = vis.iter().map(|&(_, fr, p)| data.dynamicness[fr][p]).collect();
        dm += row.iter().zip(&a).filter(|(_, &ai)| ai > 0.0).map(|(r, _)| r).sum::<f64>();
        sm += row.iter().zip(&a).filter(|(_, &ai)| ai == 0.0).map(|(r, _)| r).sum::<f64>();
        rows.push(row);
        dyns.push(a);
    }
    let (dm, sm) = (dm / counted as f64, sm / counted as f64);
    Ok(AttentionSnapshot { step, dynamic_mass: dm, static_mass: sm, ratio: dm / sm, rows, dynamicness: dyns })
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Where to write the offending state if training diverges.
    pub dump_dir: Option<PathBuf>,
}

pub struct TrainResult {
    pub params: Params,
    pub losses: Vec<LossBreakdown>,
    pub snapshots: Vec<AttentionSnapshot>,
}

impl TrainResult {
    pub fn losses_csv(&self) -> String {
        let mut s = String::from(LossBreakdown::CSV_HEADER);
        s.push('\n');
        for (i, l) in self.losses.iter().enumerate() {
            s.push_str(&l.csv_row(i));
            s.push('\n');
        }
        s
    }
}

fn dump_state(dir: &Path, params: &Params, step: usize, breakdown: Option<&LossBreakdown>) -> Result<()> {
    params.save(dir.join("params"))?;
    let info = serde_json::json!({ "step": step, "losses": breakdown });
    fs::write(dir.join("state.json"), serde_json::to_string_pretty(&info)?)?;
    Ok(())
}

/// Trains from a seeded initialization on clips of the generated scenes.
pub fn train_toy(cfg: &RunConfig, opts: &TrainOptions) -> Result<TrainResult> {
    cfg.validate()?;
    let mut params = Params::init(&cfg.model, &mut seeded(cfg.seed))?;
    let data = scene_variants(cfg)?;
    let mut clip_rng = derive(cfg.seed, 2);
    let mut opt = Optimizer::new(&cfg.train);
    let mut losses = Vec::with_capacity(cfg.train.steps);
    let mut snapshots = Vec::new();
    let eval_len = cfg.train.max_frames;

    for step in 0..cfg.train.steps {
        if step % cfg.train.snapshot_every == 0 {
            snapshots.push(attention_snapshot(&params, cfg, &data[0], eval_len, step)?);
        }
        let v = clip_rng.random_range(0..data.len());
        let len = clip_rng.random_range(cfg.train.min_frames..=cfg.train.max_frames);
        let start = clip_rng.random_range(0..=data[v].tokens.len() - len);

        let tape = Tape::new();
        let (total, breakdown, vars) = match clip_objective(&tape, &params, cfg, &data[v], start, len) {
            Err(Error::NonFinite(op)) => {
                if let Some(dir) = &opts.dump_dir {
                    dump_state(dir, &params, step, None)?;
                }
                return Err(Error::Diverged { step, detail: format!("non-finite value in {op}") });
            }
            r => r?,
        };
        let grads = if breakdown.total.is_finite() { Some(tape.backward(total)?) } else { None };
        let grads: Option<BTreeMap<String, Tensor>> = grads.map(|g| {
            vars.iter().filter_map(|(k, v)| g.get(*v).map(|t| (k.clone(), t.clone()))).collect()
        });
        let finite = grads.as_ref().is_some_and(|g| g.values().all(Tensor::is_finite));
        if !finite {
            if let Some(dir) = &opts.dump_dir {
                dump_state(dir, &params, step, Some(&breakdown))?;
            }
            return Err(Error::Diverged { step, detail: format!("total loss {}", breakdown.total) });
        }
        opt.update_with_lr(&mut params, grads.as_ref().unwrap(), cfg.train.lr_at(step));
        if let Some(name) = params.names().find(|n| !params.get(n).is_finite()) {
            let name = name.to_string();
            if let Some(dir) = &opts.dump_dir {
                dump_state(dir, &params, step, Some(&breakdown))?;
            }
            return Err(Error::Diverged { step, detail: format!("parameter {name} is not finite after the update") });
        }
        losses.push(breakdown);
    }
    snapshots.push(attention_snapshot(&params, cfg, &data[0], eval_len, cfg.train.steps)?);
    Ok(TrainResult { params, losses, snapshots })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunConfig {
        let mut c = RunConfig::default();
        c.model.d_model = 16;
        c.model.n_heads = 2;
        c.model.max_frames = 8;
        c.train.steps = 3;
        c.train.max_frames = 3;
        c.train.scene_variants = 2;
        c
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let cfg = TrainConfig { lr: 0.1, ..Default::default() };
        let mut p = Params::init(&tiny().model, &mut seeded(0)).unwrap();
        let before = p.get("final_ln.beta").clone();
        let mut grads = BTreeMap::new();
        grads.insert("final_ln.beta".to_string(), Tensor::full(&[16], 3.0));
        Optimizer::new(&cfg).update(&mut p, &grads);
        let diff = before.sub(p.get("final_ln.beta")).unwrap();
        assert!(diff.data().iter().all(|d| (d - 0.1).abs() < 1e-6));
    }

    #[test]
    fn attention_weight_only_changes_later_steps() {
        let a = train_toy(&tiny(), &TrainOptions::default()).unwrap();
        let mut c = tiny();
        c.loss.w_attn = 0.0;
        let b = train_toy(&c, &TrainOptions::default()).unwrap();
        let parts = |l: &LossBreakdown| [l.conf_depth, l.conf_point, l.motion, l.attn, l.cam_stream, l.cam_refined];
        assert_eq!(parts(&a.losses[0]), parts(&b.losses[0]));
        assert_ne!(parts(&a.losses[1]), parts(&b.losses[1]));
        assert_eq!(a.snapshots[0], b.snapshots[0]);
    }

    #[test]
    fn objective_gradients_reach_every_parameter() {
        let cfg = tiny();
        let params = Params::init(&cfg.model, &mut seeded(1)).unwrap();
        let data = scene_variants(&cfg).unwrap();
        let t = Tape::new();
        let (total, b, vars) = clip_objective(&t, &params, &cfg, &data[0], 0, 3).unwrap();
        assert!(b.total.is_finite());
        let g = t.backward(total).unwrap();
        let silent: Vec<&String> = vars.iter().filter(|(_, v)| g.wrt(**v).data().iter().all(|x| *x == 0.0)).map(|(k, _)| k).collect();
        assert_eq!(silent, Vec::<&String>::new());
    }

    #[test]
    fn snapshot_masses_partition_attention() {
        let cfg = tiny();
        let params = Params::init(&cfg.model, &mut seeded(2)).unwrap();
        let data = scene_variants(&cfg).unwrap();
        let s = attention_snapshot(&params, &cfg, &data[0], 3, 0).unwrap();
        assert!((s.dynamic_mass + s.static_mass - 1.0).abs() < 1e-12);
        assert!(s.dynamic_mass > 0.0);
    }
}
