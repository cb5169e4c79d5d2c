//! Subcommands behind the `streamrecon` binary.

pub mod stats;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Map, Value};

use streamrecon::config::RunConfig;
use streamrecon::eval::{accuracy_curve, auc, evaluate_depth, evaluate_trajectory, pair_errors, rra_rta, Trajectory};
use streamrecon::io::{read_mrt1, write_mrt1, write_pgm};
use streamrecon::layout::{build_mask, FrameLayout, IntraFrame, MaskOptions};
use streamrecon::model::{forward_batch, BatchOptions, DecodedCamera, Params};
use streamrecon::motion::{extract_motion_mask, FlowField, PairInput, SegmentationRegions};
use streamrecon::pose::{intrinsics_from_json, CameraPose};
use streamrecon::rng::{derive, seeded};
use streamrecon::scene::{generate, oracle_segmentation, PatchEmbed, SceneSpec};
use streamrecon::stream::{bench_step_latency, RefineMode, StreamState};
use streamrecon::train::{train_toy, TrainOptions};
use streamrecon::Tensor;

#[derive(Parser, Debug)]
#[command(name = "streamrecon", version, about = "Streaming 4D reconstruction toolkit")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Clone, Debug, Default)]
pub struct Common {
    /// JSON run configuration; missing fields take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Dotted-path override such as `stream.window=4`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub sets: Vec<String>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Toggle {
    On,
    Off,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MaskChoice {
    Full,
    Grouped,
    Flat,
    Sliding,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Dump an attention mask as a 0/1 text grid and as MRT1.
    Masks {
        #[arg(long, default_value_t = 2)]
        frames: usize,
        #[arg(long, default_value_t = 1)]
        patches: usize,
        #[arg(long, value_enum, default_value_t = MaskChoice::Grouped)]
        kind: MaskChoice,
        /// Window in frames for `--kind sliding`.
        #[arg(long)]
        window: Option<usize>,
    },
    /// Stream per-frame token files through the KV-cache engine.
    StreamDemo {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        window: Option<usize>,
        #[arg(long, value_enum, default_value_t = Toggle::Off)]
        ba: Toggle,
        #[arg(long)]
        anchors: Option<usize>,
        /// Parameter directory; a seeded initialization otherwise.
        #[arg(long)]
        params: Option<PathBuf>,
    },
    /// Compare streaming outputs against the masked batch forward.
    Equivalence {
        #[arg(long, default_value_t = 8)]
        frames: usize,
        /// Token files to use instead of seeded random tokens.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long, default_value_t = 1e-9)]
        tolerance: f64,
    },
    /// Train the toy model on generated scenes.
    Train,
    /// Motion mask from predicted flow, depth, poses and a segmentation.
    ExtractMotion {
        #[arg(long)]
        flow: PathBuf,
        #[arg(long)]
        seg: PathBuf,
        #[arg(long)]
        depth: PathBuf,
        #[arg(long = "pose-i")]
        pose_i: PathBuf,
        #[arg(long = "pose-j")]
        pose_j: PathBuf,
        #[arg(long = "K")]
        k: PathBuf,
    },
    /// ATE, RPE and pairwise pose accuracy of a TUM trajectory.
    EvalTraj {
        #[arg(long)]
        est: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        delta: Option<usize>,
    },
    /// Abs Rel and δ<1.25 of a depth map.
    EvalDepth {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        valid: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Toggle::On)]
        align: Toggle,
    },
    /// Render a synthetic scene with ground truth.
    GenScene {
        /// Scene spec JSON; `scene` from the run config otherwise.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Per-step streaming latency and attended-key counts.
    Bench {
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[arg(long, default_value_t = 3)]
        repetitions: usize,
        #[arg(long)]
        window: Option<usize>,
    },
}

/// Failure that is not a library error, reported with its own kind.
#[derive(Debug)]
pub struct Failure {
    pub kind: &'static str,
    pub message: String,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Failure {}

/// Machine-readable error document for stderr.
pub fn error_json(err: &anyhow::Error) -> Value {
    let kind = if let Some(e) = err.downcast_ref::<streamrecon::Error>() {
        e.kind()
    } else if let Some(f) = err.downcast_ref::<Failure>() {
        f.kind
    } else if err.downcast_ref::<std::io::Error>().is_some() {
        "io"
    } else {
        "error"
    };
    let chain: Vec<String> = err.chain().map(|e| e.to_string()).collect();
    json!({ "error": kind, "message": chain.join(": ") })
}

struct Out {
    dir: PathBuf,
}

impl Out {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Out { dir: dir.to_path_buf() })
    }

    fn path(&self, rel: &str) -> Result<PathBuf> {
        let p = self.dir.join(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        Ok(p)
    }

    fn text(&self, rel: &str, s: &str) -> Result<()> {
        fs::write(self.path(rel)?, s)?;
        Ok(())
    }

    fn json(&self, rel: &str, v: &Value) -> Result<()> {
        self.text(rel, &(serde_json::to_string_pretty(v)? + "\n"))
    }

    fn tensor(&self, rel: &str, t: &Tensor) -> Result<()> {
        Ok(write_mrt1(self.path(rel)?, t)?)
    }
}

fn optional_out(common: &Common) -> Result<Option<Out>> {
    common.out.as_deref().map(Out::new).transpose()
}

fn required_out(common: &Common, cmd: &str) -> Result<Out> {
    match &common.out {
        Some(d) => Out::new(d),
        None => bail!(Failure { kind: "usage", message: format!("{cmd} needs --out <dir>") }),
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let base = match &common.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            RunConfig::from_json(&text)?
        }
        None => RunConfig::default(),
    };
    let cfg = base.with_overrides(&common.sets)?;
    cfg.validate()?;
    Ok(cfg)
}

fn write_run(out: Option<&Out>, cfg: &RunConfig) -> Result<()> {
    if let Some(o) = out {
        o.json("run.json", &serde_json::to_value(cfg)?)?;
    }
    Ok(())
}

fn finish_report(out: Option<&Out>, report: &Value) -> Result<()> {
    if let Some(o) = out {
        o.json("report.json", report)?;
    }
    emit(&(serde_json::to_string_pretty(report)? + "\n"));
    Ok(())
}

/// Writes to stdout, tolerating a closed pipe.
fn emit(s: &str) {
    use std::io::Write;
    let _ = std::io::stdout().lock().write_all(s.as_bytes());
}

fn read_json(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?)
}

fn read_tensor(path: &Path) -> Result<Tensor> {
    read_mrt1(path).with_context(|| format!("reading {}", path.display()))
}

/// MRT1 files of a directory in name order.
fn read_token_dir(dir: &Path) -> Result<Vec<Tensor>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("mrt" | "mrt1")))
        .collect();
    files.sort();
    if files.is_empty() {
        bail!(Failure { kind: "usage", message: format!("no .mrt files in {}", dir.display()) });
    }
    files.iter().map(|p| read_tensor(p)).collect()
}

fn load_params(cfg: &RunConfig, path: Option<&Path>) -> Result<Params> {
    match path {
        Some(p) => {
            let params = Params::load(p).with_context(|| format!("loading parameters from {}", p.display()))?;
            if params.config() != &cfg.model {
                bail!(Failure { kind: "config", message: "parameter model config differs from run config".into() });
            }
            Ok(params)
        }
        None => Ok(Params::init(&cfg.model, &mut seeded(cfg.seed))?),
    }
}

fn camera_json(c: &DecodedCamera) -> Value {
    json!({
        "pose": serde_json::to_value(&c.pose).expect("pose serializes"),
        "raw": c.raw.to_vec(),
        "fallback": c.fallback,
    })
}

const TRAJECTORY_HEADER: &str = "frame,qw,qx,qy,qz,tx,ty,tz,fx,fy";

fn trajectory_csv(cams: &[&DecodedCamera]) -> String {
    let mut s = format!("{TRAJECTORY_HEADER}\n");
    for (i, c) in cams.iter().enumerate() {
        let q = c.pose.quat_wxyz();
        let t = c.pose.translation;
        let f = c.pose.focal.unwrap_or([c.raw[7], c.raw[8]]);
        s.push_str(&format!("{i},{},{},{},{},{},{},{},{},{}\n", q[0], q[1], q[2], q[3], t.x, t.y, t.z, f[0], f[1]));
    }
    s
}

fn trajectory_tum(cams: &[&DecodedCamera]) -> String {
    Trajectory::from_poses(cams.iter().map(|c| c.pose.clone()).collect()).to_tum()
}

pub fn run(cli: Cli) -> Result<()> {
    let common = &cli.common;
    match cli.command {
        Command::Masks { frames, patches, kind, window } => masks(common, frames, patches, kind, window),
        Command::StreamDemo { input, window, ba, anchors, params } => {
            stream_demo(common, &input, window, ba == Toggle::On, anchors, params.as_deref())
        }
        Command::Equivalence { frames, input, params, tolerance } => {
            equivalence(common, frames, input.as_deref(), params.as_deref(), tolerance)
        }
        Command::Train => train(common),
        Command::ExtractMotion { flow, seg, depth, pose_i, pose_j, k } => {
            extract_motion(common, &flow, &seg, &depth, &pose_i, &pose_j, &k)
        }
        Command::EvalTraj { est, gt, delta } => eval_traj(common, &est, &gt, delta),
        Command::EvalDepth { pred, gt, valid, align } => eval_depth(common, &pred, &gt, valid.as_deref(), align == Toggle::On),
        Command::GenScene { spec } => gen_scene(common, spec.as_deref()),
        Command::Bench { steps, repetitions, window } => bench(common, steps, repetitions, window),
    }
}

fn masks(common: &Common, frames: usize, patches: usize, kind: MaskChoice, window: Option<usize>) -> Result<()> {
    let cfg = load_config(common)?;
    if frames == 0 {
        bail!(Failure { kind: "usage", message: "--frames must be positive".into() });
    }
    let layout = FrameLayout::with_patches(frames, patches);
    let mask = match kind {
        MaskChoice::Full => streamrecon::layout::build_full_mask(&layout),
        MaskChoice::Grouped => build_mask(&layout, &MaskOptions::default()),
        MaskChoice::Flat => build_mask(&layout, &MaskOptions { intra_frame: IntraFrame::Causal, ..Default::default() }),
        MaskChoice::Sliding => {
            let Some(w) = window else {
                bail!(Failure { kind: "usage", message: "--kind sliding needs --window".into() });
            };
            streamrecon::layout::build_sliding_window_mask(&layout, w)?
        }
    };
    let out = optional_out(common)?;
    write_run(out.as_ref(), &cfg)?;
    let grid = mask.to_text_grid();
    if let Some(o) = &out {
        o.text("mask.txt", &grid)?;
        o.tensor("mask.mrt", &mask.to_tensor())?;
    } else {
        emit(&grid);
    }
    Ok(())
}

fn stream_demo(
    common: &Common,
    input: &Path,
    window: Option<usize>,
    ba: bool,
    anchors: Option<usize>,
    params_dir: Option<&Path>,
) -> Result<()> {
    let mut cfg = load_config(common)?;
    if window.is_some() {
        cfg.stream.window = window;
    }
    if let Some(a) = anchors {
        cfg.stream.anchors = a;
    }
    cfg.validate()?;
    let out = required_out(common, "stream-demo")?;
    write_run(Some(&out), &cfg)?;
    let frames = read_token_dir(input)?;
    let params = load_params(&cfg, params_dir)?;
    let mut state = StreamState::new(&params, cfg.stream)?;
    let preds = state.feed(&frames)?;
    for p in &preds {
        let doc = json!({
            "frame": p.frame,
            "camera": camera_json(&p.camera),
            "attended_keys": p.attended_keys,
            "key_tokens": p.key_tokens,
            "camera_attention": p.camera_attention,
        });
        o_frame(&out, p.frame, &doc, &p.dense)?;
    }
    let cams: Vec<&DecodedCamera> = preds.iter().map(|p| &p.camera).collect();
    out.text("trajectory.csv", &trajectory_csv(&cams))?;
    out.text("trajectory.tum", &trajectory_tum(&cams))?;
    if ba {
        state.finish();
        let refined = state.ba_refine()?;
        let cams: Vec<&DecodedCamera> = refined.iter().map(|r| &r.camera).collect();
        out.text("trajectory_refined.csv", &trajectory_csv(&cams))?;
        out.text("trajectory_refined.tum", &trajectory_tum(&cams))?;
    }
    let report = json!({
        "frames": preds.len(),
        "window": cfg.stream.window,
        "anchors": cfg.stream.anchors,
        "ba": ba,
        "retained_frames": state.retained_frames(),
        "cached_tokens": state.cached_tokens(),
        "attended_keys": preds.iter().map(|p| p.attended_keys).collect::<Vec<_>>(),
    });
    finish_report(Some(&out), &report)
}

fn o_frame(out: &Out, frame: usize, doc: &Value, dense: &streamrecon::model::DenseOutputs) -> Result<()> {
    out.json(&format!("preds/frame_{frame:04}.json"), doc)?;
    out.tensor(&format!("preds/depth_{frame:04}.mrt"), &dense.depth)?;
    out.tensor(&format!("preds/points_{frame:04}.mrt"), &dense.points)?;
    out.tensor(&format!("preds/motion_{frame:04}.mrt"), &dense.motion_probability())?;
    out.tensor(&format!("preds/confidence_{frame:04}.mrt"), &dense.confidence)
}

fn max_dev(a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok(a.max_abs_diff(b)?)
}

fn raw_dev(a: &DecodedCamera, b: &DecodedCamera) -> f64 {
    a.raw.iter().zip(&b.raw).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Largest deviation between streaming and batch outputs, and between
/// refined cameras when the batch pass has a refinement oracle.
pub fn equivalence_deviation(params: &Params, cfg: &RunConfig, tokens: &[Tensor]) -> Result<(f64, Option<f64>)> {
    let compare_refined = cfg.stream.window.is_none() && cfg.stream.refine_mode == RefineMode::FullStack;
    let opts = BatchOptions { mask: cfg.stream.mask_options(), refinement: compare_refined };
    let batch = forward_batch(params, tokens, &opts)?;
    let mut state = StreamState::new(params, cfg.stream)?;
    let preds = state.feed(tokens)?;
    let mut dev: f64 = 0.0;
    for (p, b) in preds.iter().zip(&batch.frames) {
        dev = dev
            .max(raw_dev(&p.camera, &b.camera))
            .max(max_dev(&p.features, &b.features)?)
            .max(max_dev(&p.dense.depth, &b.dense.depth)?)
            .max(max_dev(&p.dense.points, &b.dense.points)?)
            .max(max_dev(&p.dense.motion_logits, &b.dense.motion_logits)?)
            .max(max_dev(&p.dense.confidence, &b.dense.confidence)?);
    }
    let refined = if compare_refined {
        state.finish();
        let r = state.ba_refine()?;
        let feats = batch.refined_features.as_ref().expect("refinement requested");
        let mut d: f64 = 0.0;
        for (i, rc) in r.iter().enumerate() {
            d = d.max(raw_dev(&rc.camera, &batch.refined[i]));
            for (x, y) in rc.feature.iter().zip(feats.row(i)) {
                d = d.max((x - y).abs());
            }
        }
        Some(d)
    } else {
        None
    };
    Ok((dev, refined))
}

fn equivalence(
    common: &Common,
    frames: usize,
    input: Option<&Path>,
    params_dir: Option<&Path>,
    tolerance: f64,
) -> Result<()> {
    let cfg = load_config(common)?;
    cfg.validate()?;
    let out = optional_out(common)?;
    write_run(out.as_ref(), &cfg)?;
    let params = load_params(&cfg, params_dir)?;
    let tokens = match input {
        Some(dir) => read_token_dir(dir)?,
        None => {
            let mut rng = derive(cfg.seed, 11);
            let shape = [cfg.model.tokens_per_frame(), cfg.model.d_model];
            (0..frames).map(|_| Tensor::random_normal(&shape, 1.0, &mut rng)).collect()
        }
    };
    let (stream, refined) = equivalence_deviation(&params, &cfg, &tokens)?;
    let max = refined.map_or(stream, |r| r.max(stream));
    let report = json!({
        "frames": tokens.len(),
        "max_abs_deviation": max,
        "stream_vs_batch": stream,
        "refined_vs_batch": refined,
        "tolerance": tolerance,
        "pass": max <= tolerance,
    });
    finish_report(out.as_ref(), &report)?;
    if !(max <= tolerance) {
        bail!(Failure { kind: "tolerance", message: format!("max deviation {max:e} exceeds {tolerance:e}") });
    }
    Ok(())
}

fn train(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    cfg.validate()?;
    let out = required_out(common, "train")?;
    write_run(Some(&out), &cfg)?;
    let opts = TrainOptions { dump_dir: Some(out.dir.join("diverged")) };
    let result = train_toy(&cfg, &opts)?;
    out.text("losses.csv", &result.losses_csv())?;
    result.params.save(out.dir.join("params"))?;
    let snapshots: Vec<Value> = result.snapshots.iter().map(|s| serde_json::to_value(s).expect("snapshot")).collect();
    out.json("attention.json", &Value::Array(snapshots))?;
    let last = result.snapshots.last().expect("final snapshot");
    let report = json!({
        "steps": cfg.train.steps,
        "final_losses": serde_json::to_value(result.losses.last())?,
        "attention": result.snapshots.iter().map(|s| json!({
            "step": s.step,
            "dynamic_mass": s.dynamic_mass,
            "static_mass": s.static_mass,
            "ratio": s.ratio,
        })).collect::<Vec<_>>(),
        "final_dynamic_mass": last.dynamic_mass,
        "final_ratio": last.ratio,
    });
    finish_report(Some(&out), &report)
}

fn extract_motion(
    common: &Common,
    flow: &Path,
    seg: &Path,
    depth: &Path,
    pose_i: &Path,
    pose_j: &Path,
    k: &Path,
) -> Result<()> {
    let cfg = load_config(common)?;
    let out = optional_out(common)?;
    write_run(out.as_ref(), &cfg)?;
    let pred_flow = FlowField::from_tensor(&read_tensor(flow)?)?;
    let regions = SegmentationRegions::from_tensor(&read_tensor(seg)?)?;
    let depth = read_tensor(depth)?;
    let pose_i: CameraPose = serde_json::from_value(read_json(pose_i)?).context("parsing --pose-i")?;
    let pose_j: CameraPose = serde_json::from_value(read_json(pose_j)?).context("parsing --pose-j")?;
    let intrinsics = intrinsics_from_json(&read_json(k)?)?;
    let input = PairInput {
        pred_flow: &pred_flow,
        depth: &depth,
        pose_i: &pose_i,
        pose_j: &pose_j,
        intrinsics: &intrinsics,
        regions: &regions,
    };
    let r = extract_motion_mask(&input)?;
    let mut per_region = Map::new();
    for s in &r.regions {
        per_region.insert(s.id.to_string(), json!(s.discrepancy));
    }
    let report = json!({
        "regions": per_region,
        "threshold": r.threshold.threshold,
        "mean": r.threshold.mean,
        "std": r.threshold.std,
        "flagged": r.flagged,
        "moving_pixels": r.mask.sum(),
    });
    if let Some(o) = &out {
        o.tensor("mask.mrt", &r.mask)?;
        write_pgm(o.path("mask.pgm")?, regions.height, regions.width, r.mask.data())?;
    }
    finish_report(out.as_ref(), &report)
}

fn eval_traj(common: &Common, est: &Path, gt: &Path, delta: Option<usize>) -> Result<()> {
    let cfg = load_config(common)?;
    let out = optional_out(common)?;
    write_run(out.as_ref(), &cfg)?;
    let est = Trajectory::from_tum(&fs::read_to_string(est).with_context(|| format!("reading {}", est.display()))?)?;
    let gt = Trajectory::from_tum(&fs::read_to_string(gt).with_context(|| format!("reading {}", gt.display()))?)?;
    if est.timestamps != gt.timestamps {
        bail!(Failure { kind: "format", message: "trajectories have different timestamps".into() });
    }
    let r = evaluate_trajectory(&est, &gt, delta.unwrap_or(cfg.eval.rpe_delta))?;
    let mut report = serde_json::to_value(&r)?;
    let errors = pair_errors(&est.poses, &gt.poses)?;
    let (rra, rta) = rra_rta(&errors, 30.0);
    let obj = report.as_object_mut().expect("report is an object");
    obj.insert("RRA@30".into(), json!(rra));
    obj.insert("RTA@30".into(), json!(rta));
    obj.insert("AUC@30".into(), json!(auc(&accuracy_curve(&errors, 30))?));
    finish_report(out.as_ref(), &report)
}

fn eval_depth(common: &Common, pred: &Path, gt: &Path, valid: Option<&Path>, align: bool) -> Result<()> {
    let cfg = load_config(common)?;
    let out = optional_out(common)?;
    write_run(out.as_ref(), &cfg)?;
    let valid = valid.map(read_tensor).transpose()?;
    let r = evaluate_depth(&read_tensor(pred)?, &read_tensor(gt)?, valid.as_ref(), align)?;
    finish_report(out.as_ref(), &serde_json::to_value(&r)?)
}

fn gen_scene(common: &Common, spec_path: Option<&Path>) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(p) = spec_path {
        let spec: SceneSpec = serde_json::from_value(read_json(p)?).context("parsing --spec")?;
        cfg.model.image_height = spec.height;
        cfg.model.image_width = spec.width;
        cfg.model.patch_size = spec.patch_size;
        cfg.scene = spec;
    }
    cfg.validate()?;
    let out = required_out(common, "gen-scene")?;
    write_run(Some(&out), &cfg)?;
    let scene = generate(&cfg.scene)?;
    let embed = PatchEmbed::new(cfg.model.patch_size, cfg.model.d_model, cfg.embed_seed);
    let (h, w) = (cfg.scene.height, cfg.scene.width);
    out.json("scene.json", &serde_json::to_value(&cfg.scene)?)?;
    let k = scene.intrinsics;
    out.json("intrinsics.json", &json!((0..3).map(|r| (0..3).map(|c| k[(r, c)]).collect::<Vec<_>>()).collect::<Vec<_>>()))?;
    let poses: Vec<CameraPose> = scene.frames.iter().map(|f| f.pose.clone()).collect();
    out.text("gt_trajectory.txt", &Trajectory::from_poses(poses).to_tum())?;
    let mut moving = Vec::with_capacity(scene.frames.len());
    for (t, f) in scene.frames.iter().enumerate() {
        out.json(&format!("poses/pose_{t:04}.json"), &serde_json::to_value(&f.pose)?)?;
        out.tensor(&format!("frames/pixels_{t:04}.mrt"), &f.pixels)?;
        out.tensor(&format!("frames/depth_{t:04}.mrt"), &f.depth)?;
        out.tensor(&format!("frames/points_{t:04}.mrt"), &f.world_points)?;
        out.tensor(&format!("frames/mask_{t:04}.mrt"), &f.motion_mask)?;
        write_pgm(out.path(&format!("frames/mask_{t:04}.pgm"))?, h, w, f.motion_mask.data())?;
        out.tensor(&format!("frames/objects_{t:04}.mrt"), &f.object_ids)?;
        out.tensor(&format!("frames/seg_{t:04}.mrt"), &oracle_segmentation(f, cfg.eval.seg_tiles)?.to_tensor())?;
        out.tensor(&format!("tokens/frame_{t:04}.mrt"), &embed.tokenize(&f.pixels)?)?;
        moving.push(f.motion_mask.sum());
    }
    for (t, fl) in scene.flows.iter().enumerate() {
        out.tensor(&format!("flows/flow_{t:04}.mrt"), &fl.full.to_tensor())?;
        out.tensor(&format!("flows/ego_{t:04}.mrt"), &fl.ego.to_tensor())?;
    }
    let report = json!({ "frames": scene.frames.len(), "height": h, "width": w, "moving_pixels": moving });
    finish_report(Some(&out), &report)
}

fn bench(common: &Common, steps: usize, repetitions: usize, window: Option<usize>) -> Result<()> {
    let mut cfg = load_config(common)?;
    if window.is_some() {
        cfg.stream.window = window;
    }
    cfg.validate()?;
    let out = optional_out(common)?;
    write_run(out.as_ref(), &cfg)?;
    let params = Params::init(&cfg.model, &mut seeded(cfg.seed))?;
    let rows = bench_step_latency(&params, cfg.stream, steps, repetitions, cfg.seed)?;
    let mut attended = String::from("step,attended_tokens\n");
    let mut latency = String::from("step,seconds,attended_tokens\n");
    for r in &rows {
        attended.push_str(&format!("{},{}\n", r.step, r.attended_tokens));
        latency.push_str(&format!("{},{},{}\n", r.step, r.seconds, r.attended_tokens));
    }
    let w = cfg.stream.window.unwrap_or(steps);
    let tail: Vec<usize> = rows.iter().skip(w + 1).map(|r| r.attended_tokens).collect();
    let constant_tail = tail.windows(2).all(|p| p[0] == p[1]);
    let seconds: Vec<f64> = rows.iter().map(|r| r.seconds).collect();
    let trend = stats::slope_test(&seconds);
    let timing = json!({
        "slope_seconds_per_step": trend.map(|t| t.slope),
        "p_increasing": trend.map(|t| t.p_increasing),
        "mean_seconds": seconds.iter().sum::<f64>() / seconds.len() as f64,
    });
    let report = json!({
        "steps": steps,
        "repetitions": repetitions,
        "window": cfg.stream.window,
        "attended_constant_after_window": constant_tail,
        "max_attended": rows.iter().map(|r| r.attended_tokens).max(),
    });
    if let Some(o) = &out {
        o.text("attended.csv", &attended)?;
        o.text("latency.csv", &latency)?;
        o.json("latency.json", &timing)?;
    }
    eprintln!("{}", serde_json::to_string(&timing)?);
    finish_report(out.as_ref(), &report)
}
