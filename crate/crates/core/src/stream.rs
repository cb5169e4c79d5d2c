//! Incremental per-frame inference over per-layer key/value caches.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::{FrameLayout, IntraFrame, MaskOptions};
use crate::model::{
    affine_norm, decode_camera, decode_dense, embed_frame, multi_head_attention, DecodedCamera, DenseOutputs,
    Params,
};
use crate::rng::seeded;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    #[default]
    SingleFrame,
    /// The first two frames are ingested together and see each other.
    FramePair,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefineMode {
    /// Re-run every layer for a duplicate camera token.
    #[default]
    FullStack,
    /// Re-run only the last layer from its cached query.
    FinalLayer,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StreamConfig {
    /// Preceding frames kept in the cache; `None` keeps everything.
    pub window: Option<usize>,
    pub anchors: usize,
    pub init_mode: InitMode,
    pub refine_mode: RefineMode,
    pub intra_frame: IntraFrame,
    pub record_attention: bool,
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamConfig {
            window: None,
            anchors: 0,
            init_mode: InitMode::SingleFrame,
            refine_mode: RefineMode::FullStack,
            intra_frame: IntraFrame::Bidirectional,
            record_attention: true,
        }
    }
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == Some(0) {
            return Err(Error::Config("window must be at least 1 frame".into()));
        }
        Ok(())
    }

    /// The batch mask whose rows this stream reproduces.
    pub fn mask_options(&self) -> MaskOptions {
        MaskOptions {
            intra_frame: self.intra_frame,
            window: self.window,
            anchors: self.anchors,
            pair_init: self.init_mode == InitMode::FramePair,
        }
    }
}

/// Keys and values of one retained frame at one layer.
#[derive(Clone, Debug)]
struct FrameKv {
    frame: usize,
    keys: Tensor,
    values: Tensor,
}

#[derive(Clone, Debug, Default)]
struct LayerCache {
    frames: Vec<FrameKv>,
    /// Camera-token query per processed frame; survives eviction.
    cam_query: Vec<Tensor>,
    /// Camera-token layer input per processed frame; survives eviction.
    cam_input: Vec<Tensor>,
}

impl LayerCache {
    fn stacked(&self) -> Result<(Tensor, Tensor)> {
        let k: Vec<&Tensor> = self.frames.iter().map(|f| &f.keys).collect();
        let v: Vec<&Tensor> = self.frames.iter().map(|f| &f.values).collect();
        Ok((Tensor::concat_rows(&k)?, Tensor::concat_rows(&v)?))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FramePrediction {
    pub frame: usize,
    pub camera: DecodedCamera,
    pub dense: DenseOutputs,
    /// Final-normalized token features, camera token first.
    pub features: Tensor,
    /// Keys visible to this frame's camera token in the last layer.
    pub attended_keys: usize,
    /// Head-averaged last-layer camera attention over the cached tokens
    /// listed in `key_tokens` (absolute token indices).
    pub camera_attention: Option<Vec<f64>>,
    pub key_tokens: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefinedCamera {
    pub frame: usize,
    pub camera: DecodedCamera,
    /// Final-normalized feature of the duplicate camera token.
    pub feature: Vec<f64>,
}

/// Per-stream cache state. One owner; steps are strictly sequential.
pub struct StreamState<'a> {
    params: &'a Params,
    config: StreamConfig,
    layers: Vec<LayerCache>,
    frames_processed: usize,
    finished: bool,
}

impl<'a> StreamState<'a> {
    pub fn new(params: &'a Params, config: StreamConfig) -> Result<Self> {
        config.validate()?;
        Ok(StreamState {
            params,
            config,
            layers: vec![LayerCache::default(); params.config().n_layers],
            frames_processed: 0,
            finished: false,
        })
    }

    pub fn config(&self) -> &StreamConfig {
        &self.config
    }

    pub fn frames_processed(&self) -> usize {
        self.frames_processed
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    pub fn retained_frames(&self) -> Vec<usize> {
        self.layers[0].frames.iter().map(|f| f.frame).collect()
    }

    pub fn cached_tokens(&self) -> usize {
        self.layers[0].frames.iter().map(|f| f.keys.rows()).sum()
    }

    /// Token offsets of each retained frame inside the cache.
    pub fn frame_boundaries(&self) -> Vec<usize> {
        let mut acc = 0;
        self.layers[0]
            .frames
            .iter()
            .map(|f| {
                let start = acc;
                acc += f.keys.rows();
                start
            })
            .collect()
    }

    fn layout(&self, num_frames: usize) -> FrameLayout {
        self.params.config().layout(num_frames)
    }

    /// Drops cached keys/values that no future query can see. Camera queries stay.
    pub fn evict_window(&mut self) {
        let Some(w) = self.config.window else { return };
        let next = self.frames_processed;
        let anchors = self.config.anchors;
        for layer in &mut self.layers {
            layer.frames.retain(|f| f.frame + w >= next || f.frame < anchors);
        }
    }

    /// Ingests one frame of raw `[(1+P), d]` tokens.
    pub fn step(&mut self, frame_tokens: &Tensor) -> Result<FramePrediction> {
        if self.config.init_mode == InitMode::FramePair && self.frames_processed == 0 {
            return Err(Error::contract("frame_pair streams must start with init_pair"));
        }
        let mut out = self.ingest(&[frame_tokens])?;
        Ok(out.pop().expect("one prediction"))
    }

    /// Ingests the first two frames jointly.
    pub fn init_pair(&mut self, first: &Tensor, second: &Tensor) -> Result<Vec<FramePrediction>> {
        if self.config.init_mode != InitMode::FramePair {
            return Err(Error::contract("init_pair requires init_mode frame_pair"));
        }
        if self.frames_processed != 0 {
            return Err(Error::contract("init_pair must be the first step"));
        }
        self.ingest(&[first, second])
    }

    fn ingest(&mut self, frames: &[&Tensor]) -> Result<Vec<FramePrediction>> {
        if self.finished {
            return Err(Error::contract("stream already finished"));
        }
        let c = self.params.config();
        let tpf = c.tokens_per_frame();
        let first = self.frames_processed;
        let mut blocks = Vec::with_capacity(frames.len());
        for (i, tok) in frames.iter().enumerate() {
            if tok.shape() != [tpf, c.d_model] {
                return Err(Error::contract(format!(
                    "frame {} has token shape {:?}, expected [{tpf}, {}]",
                    first + i,
                    tok.shape(),
                    c.d_model
                )));
            }
            blocks.push(embed_frame(tok, first + i, self.params)?);
        }
        self.evict_window();

        let new_frames: Vec<usize> = (first..first + frames.len()).collect();
        let layout = self.layout(first + frames.len());
        let opts = self.config.mask_options();
        let refs: Vec<&Tensor> = blocks.iter().collect();
        let mut x = Tensor::concat_rows(&refs)?;
        let m = x.rows();
        let query_tokens: Vec<usize> = new_frames.iter().flat_map(|&f| f * tpf..(f + 1) * tpf).collect();
        let mut last_weights = Vec::new();
        let mut key_tokens = Vec::new();

        for l in 0..c.n_layers {
            let lp = self.params.layer(l);
            let a = lp.norm1(&x)?;
            let (q, k, v) = (lp.query(&a)?, lp.key(&a)?, lp.value(&a)?);
            let cache = &mut self.layers[l];
            for (i, &f) in new_frames.iter().enumerate() {
                cache.cam_query.push(q.slice_rows(i * tpf, i * tpf + 1)?);
                cache.cam_input.push(x.slice_rows(i * tpf, i * tpf + 1)?);
                cache.frames.push(FrameKv {
                    frame: f,
                    keys: k.slice_rows(i * tpf, (i + 1) * tpf)?,
                    values: v.slice_rows(i * tpf, (i + 1) * tpf)?,
                });
            }
            let (keys, values) = cache.stacked()?;
            key_tokens = cache.frames.iter().flat_map(|f| f.frame * tpf..(f.frame + 1) * tpf).collect();
            let mut visible = Vec::with_capacity(m * key_tokens.len());
            for &qt in &query_tokens {
                for &kt in &key_tokens {
                    visible.push(opts.visible(&layout, qt, kt));
                }
            }
            let (heads, weights) = multi_head_attention(&q, &keys, &values, c.n_heads, Some(&visible))?;
            let h = x.add(&lp.output(&heads)?)?;
            x = lp.mlp_residual(&h)?;
            if l + 1 == c.n_layers {
                last_weights = weights;
            }
        }

        let feats = affine_norm(&x, self.params.get("final_ln.gamma"), self.params.get("final_ln.beta"))?;
        let mut preds = Vec::with_capacity(new_frames.len());
        for (i, &f) in new_frames.iter().enumerate() {
            let rows = feats.slice_rows(i * tpf, (i + 1) * tpf)?;
            let cam_row = i * tpf;
            let camera_attention = self.config.record_attention.then(|| {
                let n = key_tokens.len();
                let mut mean = vec![0.0; n];
                for w in &last_weights {
                    for (acc, v) in mean.iter_mut().zip(w.row(cam_row)) {
                        *acc += v;
                    }
                }
                mean.iter_mut().for_each(|v| *v /= last_weights.len() as f64);
                mean
            });
            let attended_keys = key_tokens.iter().filter(|&&kt| opts.visible(&layout, f * tpf, kt)).count();
            preds.push(FramePrediction {
                frame: f,
                camera: decode_camera(rows.row(0), self.params)?,
                dense: decode_dense(&rows.slice_rows(1, tpf)?, self.params)?,
                features: rows,
                attended_keys,
                camera_attention,
                key_tokens: key_tokens.clone(),
            });
        }
        self.frames_processed += frames.len();
        Ok(preds)
    }

    /// Steps through `frames`, opening with a pair when the stream is fresh
    /// and configured for it.
    pub fn feed(&mut self, frames: &[Tensor]) -> Result<Vec<FramePrediction>> {
        let mut preds = Vec::with_capacity(frames.len());
        let mut rest = frames;
        if self.frames_processed == 0 && self.config.init_mode == InitMode::FramePair {
            if frames.len() < 2 {
                return Err(Error::contract("frame_pair streams need at least two frames"));
            }
            preds.extend(self.init_pair(&frames[0], &frames[1])?);
            rest = &frames[2..];
        }
        for f in rest {
            preds.push(self.step(f)?);
        }
        Ok(preds)
    }

    /// Seals the stream; refinement is only defined on a complete sequence.
    pub fn finish(&mut self) {
        self.finished = true;
    }

    /// Lets each frame's camera token re-attend over every cached key/value
    /// and decodes a refined camera. Streaming predictions are untouched.
    pub fn ba_refine(&self) -> Result<Vec<RefinedCamera>> {
        if !self.finished {
            return Err(Error::contract("ba_refine called before the stream finished"));
        }
        if self.frames_processed == 0 {
            return Err(Error::contract("ba_refine on an empty stream"));
        }
        let c = self.params.config();
        let caches: Vec<(Tensor, Tensor)> = self.layers.iter().map(LayerCache::stacked).collect::<Result<_>>()?;
        let layers: Vec<usize> = match self.config.refine_mode {
            RefineMode::FullStack => (0..c.n_layers).collect(),
            RefineMode::FinalLayer => vec![c.n_layers - 1],
        };
        (0..self.frames_processed)
            .into_par_iter()
            .map(|f| {
                let mut h = self.layers[layers[0]].cam_input[f].clone();
                for (i, &l) in layers.iter().enumerate() {
                    let lp = self.params.layer(l);
                    let q = if i == 0 { self.layers[l].cam_query[f].clone() } else { lp.query(&lp.norm1(&h)?)? };
                    let (keys, values) = &caches[l];
                    let (heads, _) = multi_head_attention(&q, keys, values, c.n_heads, None)?;
                    h = lp.mlp_residual(&h.add(&lp.output(&heads)?)?)?;
                }
                let feat = affine_norm(&h, self.params.get("final_ln.gamma"), self.params.get("final_ln.beta"))?;
                Ok(RefinedCamera {
                    frame: f,
                    camera: decode_camera(feat.row(0), self.params)?,
                    feature: feat.into_data(),
                })
            })
            .collect()
    }
}

/// Runs a whole sequence through a fresh stream.
pub fn run_stream(params: &Params, config: StreamConfig, frames: &[Tensor]) -> Result<Vec<FramePrediction>> {
    StreamState::new(params, config)?.feed(frames)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LatencyRow {
    pub step: usize,
    pub seconds: f64,
    pub attended_tokens: usize,
}

/// Streams `steps` random frames `repetitions` times and reports, per step,
/// the fastest wall time observed and the number of attended keys.
pub fn bench_step_latency(
    params: &Params,
    config: StreamConfig,
    steps: usize,
    repetitions: usize,
    seed: u64,
) -> Result<Vec<LatencyRow>> {
    if steps == 0 || repetitions == 0 {
        return Err(Error::contract("bench needs at least one step and one repetition"));
    }
    let c = params.config();
    let mut rng = seeded(seed);
    let frames: Vec<Tensor> =
        (0..steps).map(|_| Tensor::random_normal(&[c.tokens_per_frame(), c.d_model], 1.0, &mut rng)).collect();
    let config = StreamConfig { record_attention: false, init_mode: InitMode::SingleFrame, ..config };
    let mut best = vec![f64::INFINITY; steps];
    let mut attended = vec![0; steps];
    for _ in 0..repetitions {
        let mut state = StreamState::new(params, config)?;
        for (t, f) in frames.iter().enumerate() {
            let start = Instant::now();
            let pred = state.step(f)?;
            best[t] = best[t].min(start.elapsed().as_secs_f64());
            attended[t] = pred.attended_keys;
        }
    }
    Ok((0..steps).map(|t| LatencyRow { step: t, seconds: best[t], attended_tokens: attended[t] }).collect())
}
