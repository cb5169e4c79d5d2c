use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::layout::{build_mask, FrameLayout, MaskOptions};
use crate::tensor::Tensor;

use super::attention::{affine_norm, affine_norm_tape, block_forward, block_forward_tape, AttentionRecord};
use super::heads::{decode_camera, decode_camera_tape, decode_dense, decode_dense_tape};
use super::{CameraVars, DecodedCamera, DenseOutputs, DenseVars, ParamVars, Params};

fn check_frame(tokens_shape: &[usize], frame: usize, params: &Params) -> Result<()> {
    let c = params.config();
    if tokens_shape != [c.tokens_per_frame(), c.d_model] {
        return Err(Error::contract(format!(
            "frame {frame} has token shape {tokens_shape:?}, expected [{}, {}]",
            c.tokens_per_frame(),
            c.d_model
        )));
    }
    if frame >= c.max_frames {
        return Err(Error::contract(format!("frame index {frame} exceeds max_frames {}", c.max_frames)));
    }
    Ok(())
}

fn positional_rows(params: &Params) -> Result<Tensor> {
    let d = params.config().d_model;
    let cam = params.get("embed.camera_token").reshape(&[1, d])?;
    Tensor::concat_rows(&[&cam, params.get("embed.patch_pos")])
}

/// Adds the camera token, the patch-position table and the frame-index
/// embedding to one frame's raw `[(1+P), d]` tokens.
pub fn embed_frame(tokens: &Tensor, frame: usize, params: &Params) -> Result<Tensor> {
    check_frame(tokens.shape(), frame, params)?;
    let frame_row = params.get("embed.frame_pos").slice_rows(frame, frame + 1)?;
    tokens.add(&positional_rows(params)?)?.add_row(&frame_row)
}

pub(crate) fn embed_frame_tape(t: &Tape, tokens: &Tensor, frame: usize, params: &Params, pv: &ParamVars) -> Result<Var> {
    check_frame(tokens.shape(), frame, params)?;
    let d = params.config().d_model;
    let cam = t.reshape(pv.get("embed.camera_token"), &[1, d])?;
    let pos = t.concat_rows(&[cam, pv.get("embed.patch_pos")])?;
    let frame_row = t.slice_rows(pv.get("embed.frame_pos"), frame, frame + 1)?;
    t.add_row(t.add(t.constant(tokens.clone()), pos)?, frame_row)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BatchOptions {
    pub mask: MaskOptions,
    /// Append one duplicate camera token per frame that attends to every
    /// original token, yielding refined cameras alongside the causal ones.
    pub refinement: bool,
}

/// Decoded outputs of one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameOutput {
    pub camera: DecodedCamera,
    pub dense: DenseOutputs,
    /// Final-normalized features of the frame's tokens, camera token first.
    pub features: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchOutputs {
    pub layout: FrameLayout,
    pub frames: Vec<FrameOutput>,
    /// Final-normalized features of the duplicate camera tokens, `[T, d]`.
    pub refined_features: Option<Tensor>,
    pub refined: Vec<DecodedCamera>,
    pub attention: AttentionRecord,
}

fn stack_embedded(tokens: &[Tensor], params: &Params, refinement: bool) -> Result<Tensor> {
    let mut rows = Vec::with_capacity(tokens.len());
    for (f, x) in tokens.iter().enumerate() {
        rows.push(embed_frame(x, f, params)?);
    }
    let mut dups = Vec::new();
    if refinement {
        for r in &rows {
            dups.push(r.slice_rows(0, 1)?);
        }
    }
    let refs: Vec<&Tensor> = rows.iter().chain(&dups).collect();
    Tensor::concat_rows(&refs)
}

fn batch_mask(params: &Params, num_frames: usize, opts: &BatchOptions) -> (FrameLayout, crate::layout::AttentionMask) {
    let layout = params.config().layout(num_frames);
    let mask = build_mask(&layout, &opts.mask);
    let mask = if opts.refinement { mask.with_refinement_queries(&layout) } else { mask };
    (layout, mask)
}

/// Whole-sequence forward pass with an explicit attention mask.
pub fn forward_batch(params: &Params, tokens: &[Tensor], opts: &BatchOptions) -> Result<BatchOutputs> {
    if tokens.is_empty() {
        return Err(Error::contract("forward_batch needs at least one frame"));
    }
    let (layout, mask) = batch_mask(params, tokens.len(), opts);
    let mut x = stack_embedded(tokens, params, opts.refinement)?;
    let mut attention = AttentionRecord::default();
    for l in 0..params.config().n_layers {
        let (y, rec) = block_forward(&x, &mask, &params.layer(l))?;
        x = y;
        attention.layers.extend(rec.layers);
    }
    let feats = affine_norm(&x, params.get("final_ln.gamma"), params.get("final_ln.beta"))?;
    let tpf = layout.tokens_per_frame();
    let mut frames = Vec::with_capacity(layout.num_frames);
    for f in 0..layout.num_frames {
        let rows = feats.slice_rows(f * tpf, (f + 1) * tpf)?;
        frames.push(FrameOutput {
            camera: decode_camera(rows.row(0), params)?,
            dense: decode_dense(&rows.slice_rows(1, tpf)?, params)?,
            features: rows,
        });
    }
    let (refined_features, refined) = if opts.refinement {
        let n0 = layout.total_tokens();
        let r = feats.slice_rows(n0, n0 + layout.num_frames)?;
        let cams = (0..layout.num_frames).map(|f| decode_camera(r.row(f), params)).collect::<Result<_>>()?;
        (Some(r), cams)
    } else {
        (None, Vec::new())
    };
    Ok(BatchOutputs { layout, frames, refined_features, refined, attention })
}

/// Tape handles produced by [`forward_batch_tape`].
pub struct TapeOutputs {
    pub layout: FrameLayout,
    pub cameras: Vec<CameraVars>,
    pub dense: Vec<DenseVars>,
    pub refined: Vec<CameraVars>,
    /// `[layer][head]` attention weights over all (original + duplicate) tokens.
    pub attention: Vec<Vec<Var>>,
    pub features: Var,
}

pub fn forward_batch_tape(
    t: &Tape,
    params: &Params,
    pv: &ParamVars,
    tokens: &[Tensor],
    opts: &BatchOptions,
) -> Result<TapeOutputs> {
    if tokens.is_empty() {
        return Err(Error::contract("forward_batch needs at least one frame"));
    }
    let (layout, mask) = batch_mask(params, tokens.len(), opts);
    let mut rows = Vec::with_capacity(tokens.len());
    for (f, x) in tokens.iter().enumerate() {
        rows.push(embed_frame_tape(t, x, f, params, pv)?);
    }
    if opts.refinement {
        for f in 0..tokens.len() {
            rows.push(t.slice_rows(rows[f], 0, 1)?);
        }
    }
    let mut x = t.concat_rows(&rows)?;
    let mut attention = Vec::new();
    for l in 0..params.config().n_layers {
        let (y, w) = block_forward_tape(t, x, &mask, &pv.layer(l))?;
        x = y;
        attention.push(w);
    }
    let feats = affine_norm_tape(t, x, pv.get("final_ln.gamma"), pv.get("final_ln.beta"))?;
    let tpf = layout.tokens_per_frame();
    let mut cameras = Vec::with_capacity(layout.num_frames);
    let mut dense = Vec::with_capacity(layout.num_frames);
    for f in 0..layout.num_frames {
        let cam = t.slice_rows(feats, f * tpf, f * tpf + 1)?;
        cameras.push(decode_camera_tape(t, cam, pv)?);
        let patches = t.slice_rows(feats, f * tpf + 1, (f + 1) * tpf)?;
        dense.push(decode_dense_tape(t, patches, pv, params.config())?);
    }
    let mut refined = Vec::new();
    if opts.refinement {
        let n0 = layout.total_tokens();
        for f in 0..layout.num_frames {
            refined.push(decode_camera_tape(t, t.slice_rows(feats, n0 + f, n0 + f + 1)?, pv)?);
        }
    }
    Ok(TapeOutputs { layout, cameras, dense, refined, attention, features: feats })
}
