//! Frame-structured token sequences and attention visibility masks.
//!
//! Each frame contributes one camera token followed by `P` patch tokens, so
//! token `t * (1 + P)` is frame `t`'s camera token.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameLayout {
    pub num_frames: usize,
    pub patch_size: usize,
    pub image_height: usize,
    pub image_width: usize,
}

impl FrameLayout {
    pub fn new(num_frames: usize, patch_size: usize, image_height: usize, image_width: usize) -> Result<Self> {
        if patch_size == 0 || image_height == 0 || image_width == 0 {
            return Err(Error::contract("patch size and image dimensions must be positive"));
        }
        if image_height % patch_size != 0 || image_width % patch_size != 0 {
            return Err(Error::contract(format!(
                "image {image_height}x{image_width} is not divisible by patch size {patch_size}"
            )));
        }
        Ok(FrameLayout { num_frames, patch_size, image_height, image_width })
    }

    /// A `1 × P` patch grid with unit patches, for mask-only work.
    pub fn with_patches(num_frames: usize, patch_tokens: usize) -> Self {
        FrameLayout { num_frames, patch_size: 1, image_height: 1, image_width: patch_tokens }
    }

    pub fn with_frames(&self, num_frames: usize) -> Self {
        FrameLayout { num_frames, ..*self }
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.image_height / self.patch_size, self.image_width / self.patch_size)
    }

    pub fn patch_tokens(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    pub fn tokens_per_frame(&self) -> usize {
        1 + self.patch_tokens()
    }

    pub fn total_tokens(&self) -> usize {
        self.num_frames * self.tokens_per_frame()
    }

    pub fn frame_of(&self, token: usize) -> usize {
        token / self.tokens_per_frame()
    }

    pub fn camera_token(&self, frame: usize) -> usize {
        frame * self.tokens_per_frame()
    }

    pub fn patch_token(&self, frame: usize, patch: usize) -> usize {
        frame * self.tokens_per_frame() + 1 + patch
    }

    pub fn is_camera_token(&self, token: usize) -> bool {
        token % self.tokens_per_frame() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    Full,
    GroupedCausal,
    FlatCausal,
    SlidingWindow { frames: usize },
    /// Anything built from non-default [`MaskOptions`].
    Custom,
}

/// Token order rule inside one frame.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntraFrame {
    #[default]
    Bidirectional,
    Causal,
}

/// General visibility rule. The named builders are special cases.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskOptions {
    pub intra_frame: IntraFrame,
    /// Number of preceding frames a query may see; `None` is unbounded.
    pub window: Option<usize>,
    /// Leading frames that stay visible regardless of the window.
    pub anchors: usize,
    /// Frames 0 and 1 form one group that sees itself bidirectionally.
    pub pair_init: bool,
}

impl MaskOptions {
    fn group(&self, frame: usize) -> usize {
        if self.pair_init {
            frame.saturating_sub(1)
        } else {
            frame
        }
    }

    /// Visibility of key token `k` from query token `q`.
    pub fn visible(&self, layout: &FrameLayout, q: usize, k: usize) -> bool {
        let (fq, fk) = (layout.frame_of(q), layout.frame_of(k));
        let (gq, gk) = (self.group(fq), self.group(fk));
        if gk > gq {
            return false;
        }
        if gk == gq && self.intra_frame == IntraFrame::Causal && k > q {
            return false;
        }
        match self.window {
            Some(w) => fk + w >= fq || fk < self.anchors,
            None => true,
        }
    }
}

/// Dense `N × N` visibility matrix; row = query, column = key.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    n: usize,
    visible: Vec<bool>,
    kind: MaskKind,
}

impl AttentionMask {
    pub fn from_predicate(n: usize, kind: MaskKind, pred: impl Fn(usize, usize) -> bool) -> Self {
        let mut visible = Vec::with_capacity(n * n);
        for q in 0..n {
            for k in 0..n {
                visible.push(pred(q, k));
            }
        }
        AttentionMask { n, visible, kind }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.visible
    }

    pub fn get(&self, q: usize, k: usize) -> bool {
        self.visible[q * self.n + k]
    }

    pub fn row(&self, q: usize) -> &[bool] {
        &self.visible[q * self.n..(q + 1) * self.n]
    }

    pub fn visible_count(&self, q: usize) -> usize {
        self.row(q).iter().filter(|&&v| v).count()
    }

    /// Every row has at least one visible key.
    pub fn is_valid(&self) -> bool {
        (0..self.n).all(|q| self.visible_count(q) > 0)
    }

    /// Entrywise `self ⊇ other`.
    pub fn contains(&self, other: &AttentionMask) -> bool {
        self.n == other.n && self.visible.iter().zip(&other.visible).all(|(a, b)| *a || !*b)
    }

    /// Appends one query token per frame that duplicates the frame's camera
    /// token and sees every original token. Original tokens never see the
    /// appended ones, and the appended ones do not see each other.
    pub fn with_refinement_queries(&self, layout: &FrameLayout) -> AttentionMask {
        let n0 = self.n;
        let t = layout.num_frames;
        let n = n0 + t;
        let mut visible = vec![false; n * n];
        for q in 0..n0 {
            visible[q * n..q * n + n0].copy_from_slice(self.row(q));
        }
        for q in n0..n {
            visible[q * n..q * n + n0].fill(true);
        }
        AttentionMask { n, visible, kind: MaskKind::Custom }
    }

    /// Rows of `0`/`1` characters separated by spaces.
    pub fn to_text_grid(&self) -> String {
        let mut s = String::with_capacity(self.n * (2 * self.n + 1));
        for q in 0..self.n {
            let line: Vec<&str> = self.row(q).iter().map(|&v| if v { "1" } else { "0" }).collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
        s
    }

    pub fn to_tensor(&self) -> Tensor {
        let data = self.visible.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
        Tensor::new(vec![self.n, self.n], data).expect("square mask")
    }
}

pub fn build_mask(layout: &FrameLayout, opts: &MaskOptions) -> AttentionMask {
    AttentionMask::from_predicate(layout.total_tokens(), MaskKind::Custom, |q, k| opts.visible(layout, q, k))
}

pub fn build_full_mask(layout: &FrameLayout) -> AttentionMask {
    AttentionMask::from_predicate(layout.total_tokens(), MaskKind::Full, |_, _| true)
}

/// Causal across frames, bidirectional within a frame.
pub fn build_grouped_causal_mask(layout: &FrameLayout) -> AttentionMask {
    let opts = MaskOptions::default();
    AttentionMask::from_predicate(layout.total_tokens(), MaskKind::GroupedCausal, |q, k| {
        opts.visible(layout, q, k)
    })
}

/// Token-index causality, ignoring frame structure.
pub fn build_flat_causal_mask(layout: &FrameLayout) -> AttentionMask {
    let opts = MaskOptions { intra_frame: IntraFrame::Causal, ..Default::default() };
    AttentionMask::from_predicate(layout.total_tokens(), MaskKind::FlatCausal, |q, k| {
        opts.visible(layout, q, k)
    })
}

/// Grouped causal, limited to the own frame plus `window_frames` predecessors.
pub fn build_sliding_window_mask(layout: &FrameLayout, window_frames: usize) -> Result<AttentionMask> {
    if window_frames == 0 {
        return Err(Error::contract("window_frames must be at least 1"));
    }
    let opts = MaskOptions { window: Some(window_frames), ..Default::default() };
    Ok(AttentionMask::from_predicate(
        layout.total_tokens(),
        MaskKind::SlidingWindow { frames: window_frames },
        |q, k| opts.visible(layout, q, k),
    ))
}
