use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::layout::{AttentionMask, FrameLayout};
use crate::tensor::Tensor;

use super::{ParamVars, Params, LN_EPS};

/// Borrowed view of one transformer layer's parameters.
pub struct LayerParams<'a> {
    pub n_heads: usize,
    ln1_gamma: &'a Tensor,
    ln1_beta: &'a Tensor,
    wq: &'a Tensor,
    wk: &'a Tensor,
    wv: &'a Tensor,
    wo: &'a Tensor,
    bq: &'a Tensor,
    bk: &'a Tensor,
    bv: &'a Tensor,
    bo: &'a Tensor,
    ln2_gamma: &'a Tensor,
    ln2_beta: &'a Tensor,
    w1: &'a Tensor,
    b1: &'a Tensor,
    w2: &'a Tensor,
    b2: &'a Tensor,
}

fn project(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    x.matmul(w)?.add_row(b)
}

pub(crate) fn affine_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    x.layer_norm(LN_EPS)?.0.mul_row(gamma)?.add_row(beta)
}

impl<'a> LayerParams<'a> {
    pub(super) fn new(p: &'a Params, l: usize) -> Self {
        let g = |n: &str| p.get(&format!("layers.{l}.{n}"));
        LayerParams {
            n_heads: p.config().n_heads,
            ln1_gamma: g("ln1.gamma"),
            ln1_beta: g("ln1.beta"),
            wq: g("attn.wq"),
            wk: g("attn.wk"),
            wv: g("attn.wv"),
            wo: g("attn.wo"),
            bq: g("attn.bq"),
            bk: g("attn.bk"),
            bv: g("attn.bv"),
            bo: g("attn.bo"),
            ln2_gamma: g("ln2.gamma"),
            ln2_beta: g("ln2.beta"),
            w1: g("mlp.w1"),
            b1: g("mlp.b1"),
            w2: g("mlp.w2"),
            b2: g("mlp.b2"),
        }
    }

    pub fn norm1(&self, x: &Tensor) -> Result<Tensor> {
        affine_norm(x, self.ln1_gamma, self.ln1_beta)
    }

    pub fn query(&self, a: &Tensor) -> Result<Tensor> {
        project(a, self.wq, self.bq)
    }

    pub fn key(&self, a: &Tensor) -> Result<Tensor> {
        project(a, self.wk, self.bk)
    }

    pub fn value(&self, a: &Tensor) -> Result<Tensor> {
        project(a, self.wv, self.bv)
    }

    pub fn output(&self, heads: &Tensor) -> Result<Tensor> {
        project(heads, self.wo, self.bo)
    }

    /// `h + MLP(LN2(h))`.
    pub fn mlp_residual(&self, h: &Tensor) -> Result<Tensor> {
        let a = affine_norm(h, self.ln2_gamma, self.ln2_beta)?;
        let hidden = project(&a, self.w1, self.b1)?.gelu();
        h.add(&project(&hidden, self.w2, self.b2)?)
    }
}

/// Scaled dot-product attention of `q` rows over `k`/`v` rows, split into
/// `n_heads` column blocks. Returns the concatenated head outputs and each
/// head's weight matrix.
pub fn multi_head_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    n_heads: usize,
    visible: Option<&[bool]>,
) -> Result<(Tensor, Vec<Tensor>)> {
    let d = q.cols();
    if k.cols() != d || v.cols() != d || k.rows() != v.rows() || d % n_heads != 0 {
        return Err(Error::dim(
            "multi_head_attention",
            format!("q {:?}, k {:?}, v {:?}, {} heads", q.shape(), k.shape(), v.shape(), n_heads),
        ));
    }
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(n_heads);
    let mut weights = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (c0, c1) = (h * dh, (h + 1) * dh);
        let qh = q.slice_cols(c0, c1)?;
        let kt = k.slice_cols(c0, c1)?.transpose()?;
        let vh = v.slice_cols(c0, c1)?;
        let alpha = qh.matmul(&kt)?.scale(scale).softmax_rows(visible)?;
        outs.push(alpha.matmul(&vh)?);
        weights.push(alpha);
    }
    let refs: Vec<&Tensor> = outs.iter().collect();
    Ok((Tensor::concat_cols(&refs)?, weights))
}

/// Per-layer, per-head attention weights captured during a forward pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AttentionRecord {
    pub layers: Vec<Vec<Tensor>>,
}

impl AttentionRecord {
    /// Head-averaged weights of one layer.
    pub fn head_mean(&self, layer: usize) -> Result<Tensor> {
        let heads = self
            .layers
            .get(layer)
            .ok_or_else(|| Error::contract(format!("no attention recorded for layer {layer}")))?;
        let mut acc = heads[0].clone();
        for h in &heads[1..] {
            acc = acc.add(h)?;
        }
        Ok(acc.scale(1.0 / heads.len() as f64))
    }

    /// Head-averaged attention row of a frame's camera token.
    pub fn camera_row(&self, layout: &FrameLayout, frame: usize, layer: usize) -> Result<Vec<f64>> {
        let mean = self.head_mean(layer)?;
        Ok(mean.row(layout.camera_token(frame)).to_vec())
    }
}

/// Standard masked multi-head self-attention on already-normalized input.
pub fn mha_forward(x: &Tensor, mask: &AttentionMask, layer: &LayerParams) -> Result<(Tensor, AttentionRecord)> {
    if !x.is_finite() {
        return Err(Error::NonFinite("mha_forward input"));
    }
    if mask.size() != x.rows() {
        return Err(Error::dim("mha_forward", format!("mask {} for {} tokens", mask.size(), x.rows())));
    }
    let (q, k, v) = (layer.query(x)?, layer.key(x)?, layer.value(x)?);
    let (heads, weights) = multi_head_attention(&q, &k, &v, layer.n_heads, Some(mask.as_slice()))?;
    Ok((layer.output(&heads)?, AttentionRecord { layers: vec![weights] }))
}

/// Pre-norm residual block: `h = x + Attn(LN1 x)`, `out = h + MLP(LN2 h)`.
pub fn block_forward(x: &Tensor, mask: &AttentionMask, layer: &LayerParams) -> Result<(Tensor, AttentionRecord)> {
    let (attn, record) = mha_forward(&layer.norm1(x)?, mask, layer)?;
    let h = x.add(&attn)?;
    Ok((layer.mlp_residual(&h)?, record))
}

/// Tape handles for one layer.
pub struct LayerVars {
    pub n_heads: usize,
    ln1_gamma: Var,
    ln1_beta: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    bq: Var,
    bk: Var,
    bv: Var,
    bo: Var,
    ln2_gamma: Var,
    ln2_beta: Var,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

impl LayerVars {
    pub(super) fn new(p: &ParamVars, l: usize) -> Self {
        let g = |n: &str| p.get(&format!("layers.{l}.{n}"));
        LayerVars {
            n_heads: p.n_heads(),
            ln1_gamma: g("ln1.gamma"),
            ln1_beta: g("ln1.beta"),
            wq: g("attn.wq"),
            wk: g("attn.wk"),
            wv: g("attn.wv"),
            wo: g("attn.wo"),
            bq: g("attn.bq"),
            bk: g("attn.bk"),
            bv: g("attn.bv"),
            bo: g("attn.bo"),
            ln2_gamma: g("ln2.gamma"),
            ln2_beta: g("ln2.beta"),
            w1: g("mlp.w1"),
            b1: g("mlp.b1"),
            w2: g("mlp.w2"),
            b2: g("mlp.b2"),
        }
    }
}

fn project_tape(t: &Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    t.add_row(t.matmul(x, w)?, b)
}

pub(crate) fn affine_norm_tape(t: &Tape, x: Var, gamma: Var, beta: Var) -> Result<Var> {
    let n = t.layer_norm(x, LN_EPS)?;
    t.add_row(t.mul_row(n, gamma)?, beta)
}

/// Tape version of [`mha_forward`]; returns per-head weight nodes.
pub fn mha_forward_tape(t: &Tape, x: Var, mask: &AttentionMask, layer: &LayerVars) -> Result<(Var, Vec<Var>)> {
    let xv = t.value(x);
    if !xv.is_finite() {
        return Err(Error::NonFinite("mha_forward input"));
    }
    if mask.size() != xv.rows() {
        return Err(Error::dim("mha_forward", format!("mask {} for {} tokens", mask.size(), xv.rows())));
    }
    let q = project_tape(t, x, layer.wq, layer.bq)?;
    let k = project_tape(t, x, layer.wk, layer.bk)?;
    let v = project_tape(t, x, layer.wv, layer.bv)?;
    let d = xv.cols();
    let nh = layer.n_heads;
    let dh = d / nh;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(nh);
    let mut weights = Vec::with_capacity(nh);
    for h in 0..nh {
        let (c0, c1) = (h * dh, (h + 1) * dh);
        let qh = t.slice_cols(q, c0, c1)?;
        let kt = t.transpose(t.slice_cols(k, c0, c1)?)?;
        let vh = t.slice_cols(v, c0, c1)?;
        let scores = t.scale(t.matmul(qh, kt)?, scale);
        let alpha = t.softmax_rows(scores, Some(mask.as_slice()))?;
        outs.push(t.matmul(alpha, vh)?);
        weights.push(alpha);
    }
    let heads = t.concat_cols(&outs)?;
    Ok((project_tape(t, heads, layer.wo, layer.bo)?, weights))
}

pub fn block_forward_tape(t: &Tape, x: Var, mask: &AttentionMask, layer: &LayerVars) -> Result<(Var, Vec<Var>)> {
    let a = affine_norm_tape(t, x, layer.ln1_gamma, layer.ln1_beta)?;
    let (attn, weights) = mha_forward_tape(t, a, mask, layer)?;
    let h = t.add(x, attn)?;
    let a2 = affine_norm_tape(t, h, layer.ln2_gamma, layer.ln2_beta)?;
    let hidden = t.gelu(project_tape(t, a2, layer.w1, layer.b1)?);
    let out = t.add(h, project_tape(t, hidden, layer.w2, layer.b2)?)?;
    Ok((out, weights))
}
