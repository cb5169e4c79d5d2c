use streamrecon::config::{OptimizerKind, RunConfig};
use streamrecon::motion::{extract_motion_mask, PairInput};
use streamrecon::scene::{generate, oracle_segmentation, SceneSpec};
use streamrecon::train::{train_toy, TrainOptions};
use streamrecon::Error;

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s[s.len() / 2]
}

#[test]
fn training_loss_trends_down() {
    let mut cfg = RunConfig::default();
    cfg.train.steps = 150;
    let result = train_toy(&cfg, &TrainOptions::default()).unwrap();
    let totals: Vec<f64> = result.losses.iter().map(|l| l.total).collect();
    let k = totals.len() / 10;
    let (head, tail) = (median(&totals[..k]), median(&totals[totals.len() - k..]));
    assert!(tail < head, "first {head}, last {tail}");
    assert_eq!(result.snapshots.first().unwrap().step, 0);
    assert_eq!(result.snapshots.last().unwrap().step, 150);
}

#[test]
fn training_is_reproducible() {
    let mut cfg = RunConfig::default();
    cfg.train.steps = 12;
    let a = train_toy(&cfg, &TrainOptions::default()).unwrap();
    let b = train_toy(&cfg, &TrainOptions::default()).unwrap();
    assert_eq!(a.losses_csv(), b.losses_csv());
    assert_eq!(a.snapshots, b.snapshots);
}

#[test]
fn divergence_dumps_state_and_fails() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::default();
    cfg.train.steps = 20;
    cfg.train.optimizer = OptimizerKind::Sgd;
    cfg.train.warmup_steps = 0;
    cfg.train.lr = 1e200;
    let Err(err) = train_toy(&cfg, &TrainOptions { dump_dir: Some(dir.path().to_path_buf()) }) else {
        panic!("training with lr 1e200 should diverge");
    };
    assert!(matches!(err, Error::Diverged { .. }), "{err}");
    let state: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("state.json")).unwrap()).unwrap();
    assert!(state["step"].as_u64().is_some());
    assert!(dir.path().join("params").exists());
}

#[test]
fn motion_masks_match_ground_truth_across_scenes() {
    let tiles = RunConfig::default().eval.seg_tiles;
    for seed in 0..3 {
        let mut spec = SceneSpec { seed, ..Default::default() };
        for (i, o) in spec.objects.iter_mut().enumerate() {
            o.velocity = [0.05 + 0.03 * (seed + i as u64) as f64, -0.04, 0.0];
        }
        let scene = generate(&spec).unwrap();
        for (t, flow) in scene.flows.iter().enumerate() {
            let (fi, fj) = (&scene.frames[t], &scene.frames[t + 1]);
            let regions = oracle_segmentation(fi, tiles).unwrap();
            let report = extract_motion_mask(&PairInput {
                pred_flow: &flow.full,
                depth: &fi.depth,
                pose_i: &fi.pose,
                pose_j: &fj.pose,
                intrinsics: &scene.intrinsics,
                regions: &regions,
            })
            .unwrap();
            assert_eq!(report.mask, fi.motion_mask, "seed {seed} pair {t}");
        }
    }
}
