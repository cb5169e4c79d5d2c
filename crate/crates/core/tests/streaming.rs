use proptest::prelude::*;

use streamrecon::layout::IntraFrame;
use streamrecon::model::{forward_batch, BatchOptions, ModelConfig, Params};
use streamrecon::rng::{derive, seeded};
use streamrecon::stream::{run_stream, InitMode, StreamConfig, StreamState};
use streamrecon::Tensor;

fn small() -> ModelConfig {
    ModelConfig { d_model: 16, n_heads: 2, max_frames: 12, ..Default::default() }
}

fn tokens(config: &ModelConfig, frames: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = derive(seed, 11);
    (0..frames).map(|_| Tensor::random_normal(&[config.tokens_per_frame(), config.d_model], 1.0, &mut rng)).collect()
}

fn stream_config(window: Option<usize>, anchors: usize, pair: bool, flat: bool) -> StreamConfig {
    StreamConfig {
        window,
        anchors,
        init_mode: if pair { InitMode::FramePair } else { InitMode::SingleFrame },
        intra_frame: if flat { IntraFrame::Causal } else { IntraFrame::Bidirectional },
        ..Default::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn stream_reproduces_batch(
        seed in 0u64..500,
        frames in 1usize..7,
        window in prop::option::of(1usize..4),
        anchors in 0usize..2,
        pair in any::<bool>(),
        flat in any::<bool>(),
    ) {
        let cfg = small();
        let params = Params::init(&cfg, &mut seeded(seed)).unwrap();
        let x = tokens(&cfg, frames, seed);
        let sc = stream_config(window, anchors, pair && frames >= 2, flat);
        let streamed = run_stream(&params, sc, &x).unwrap();
        let batch = forward_batch(&params, &x, &BatchOptions { mask: sc.mask_options(), refinement: false }).unwrap();
        prop_assert_eq!(streamed.len(), frames);
        for (s, b) in streamed.iter().zip(&batch.frames) {
            prop_assert!(s.features.max_abs_diff(&b.features).unwrap() < 1e-9);
            for (u, v) in s.camera.raw.iter().zip(&b.camera.raw) {
                prop_assert!((u - v).abs() < 1e-9);
            }
            prop_assert!(s.dense.depth.max_abs_diff(&b.dense.depth).unwrap() < 1e-9);
        }
    }

    #[test]
    fn outputs_are_prefix_stable(seed in 0u64..500, frames in 2usize..7, window in prop::option::of(1usize..4)) {
        let cfg = small();
        let params = Params::init(&cfg, &mut seeded(seed)).unwrap();
        let x = tokens(&cfg, frames, seed);
        let sc = stream_config(window, 0, false, false);
        let full = run_stream(&params, sc, &x).unwrap();
        let short = run_stream(&params, sc, &x[..frames - 1]).unwrap();
        for (a, b) in short.iter().zip(&full) {
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn attended_keys_are_bounded_and_rows_are_distributions(
        seed in 0u64..500,
        frames in 1usize..9,
        window in 1usize..4,
    ) {
        let cfg = small();
        let per_frame = cfg.tokens_per_frame();
        let params = Params::init(&cfg, &mut seeded(seed)).unwrap();
        let x = tokens(&cfg, frames, seed);
        let preds = run_stream(&params, stream_config(Some(window), 0, false, false), &x).unwrap();
        for p in &preds {
            prop_assert!(p.attended_keys <= (window + 1) * per_frame);
            let row = p.camera_attention.as_ref().unwrap();
            prop_assert_eq!(row.len(), p.key_tokens.len());
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            prop_assert!(row.iter().all(|&a| a >= 0.0));
            prop_assert!(p.dense.depth.data().iter().all(|&d| d > 0.0));
            prop_assert!(p.dense.confidence.data().iter().all(|&c| c >= 1.0));
        }
    }
}

#[test]
fn feeding_in_chunks_matches_one_call() {
    let cfg = small();
    let params = Params::init(&cfg, &mut seeded(3)).unwrap();
    let x = tokens(&cfg, 6, 3);
    let sc = stream_config(Some(2), 1, true, false);
    let whole = run_stream(&params, sc, &x).unwrap();
    let mut state = StreamState::new(&params, sc).unwrap();
    let mut parts = state.feed(&x[..2]).unwrap();
    parts.extend(state.feed(&x[2..3]).unwrap());
    parts.extend(state.feed(&x[3..]).unwrap());
    assert_eq!(parts, whole);
    assert_eq!(state.frames_processed(), 6);
}

#[test]
fn refinement_from_stream_matches_batch_refinement() {
    let cfg = small();
    for frames in [1, 3, 5] {
        let params = Params::init(&cfg, &mut seeded(frames as u64)).unwrap();
        let x = tokens(&cfg, frames, 21);
        let mut state = StreamState::new(&params, StreamConfig::default()).unwrap();
        state.feed(&x).unwrap();
        state.finish();
        let refined = state.ba_refine().unwrap();
        let again = state.ba_refine().unwrap();
        assert_eq!(refined, again);
        let batch = forward_batch(&params, &x, &BatchOptions { refinement: true, ..Default::default() }).unwrap();
        for (r, b) in refined.iter().zip(&batch.refined) {
            let err = r.camera.raw.iter().zip(&b.raw).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max);
            assert!(err < 1e-9, "T={frames}: {err}");
        }
    }
}
