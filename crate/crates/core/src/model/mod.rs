//! Toy transformer: parameters, attention blocks and decoding heads.

mod attention;
mod forward;
mod heads;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::io::{read_mrt1, write_mrt1};
use crate::layout::FrameLayout;
use crate::rng::SeededRng;
use crate::tensor::Tensor;

pub use attention::{
    block_forward, block_forward_tape, mha_forward, mha_forward_tape, multi_head_attention, AttentionRecord,
    LayerParams, LayerVars,
};
pub use forward::{embed_frame, forward_batch, forward_batch_tape, BatchOptions, BatchOutputs, FrameOutput, TapeOutputs};
pub(crate) use attention::affine_norm;
pub use heads::{
    camera_from_raw, decode_camera, decode_camera_tape, decode_dense, encode_camera, decode_dense_tape, pixel_order_indices, CameraVars,
    DecodedCamera, DenseOutputs, DenseVars, CAMERA_DIM,
};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub mlp_ratio: f64,
    pub patch_size: usize,
    pub image_height: usize,
    pub image_width: usize,
    /// Size of the learned frame-index embedding table.
    pub max_frames: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            mlp_ratio: 4.0,
            patch_size: 4,
            image_height: 16,
            image_width: 16,
            max_frames: 256,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.n_layers == 0 {
            return Err(Error::Config("d_model, n_heads and n_layers must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(self.mlp_ratio > 0.0) {
            return Err(Error::Config("mlp_ratio must be positive".into()));
        }
        if self.max_frames == 0 {
            return Err(Error::Config("max_frames must be positive".into()));
        }
        FrameLayout::new(0, self.patch_size, self.image_height, self.image_width)
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn mlp_hidden(&self) -> usize {
        ((self.d_model as f64) * self.mlp_ratio).round() as usize
    }

    pub fn patch_pixels(&self) -> usize {
        self.patch_size * self.patch_size
    }

    pub fn layout(&self, num_frames: usize) -> FrameLayout {
        FrameLayout {
            num_frames,
            patch_size: self.patch_size,
            image_height: self.image_height,
            image_width: self.image_width,
        }
    }

    pub fn patch_tokens(&self) -> usize {
        self.layout(0).patch_tokens()
    }

    pub fn tokens_per_frame(&self) -> usize {
        1 + self.patch_tokens()
    }
}

/// Named parameter tensors, kept in a sorted map so iteration order (and
/// therefore serialization and optimizer state) is deterministic.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    config: ModelConfig,
    tensors: BTreeMap<String, Tensor>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    file: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: ModelConfig,
    tensors: BTreeMap<String, ManifestEntry>,
}

impl Params {
    pub fn init(config: &ModelConfig, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let h = config.mlp_hidden();
        let s2 = config.patch_pixels();
        let mut t = BTreeMap::new();
        let xavier = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();

        t.insert("embed.camera_token".into(), Tensor::random_normal(&[d], 0.5, rng));
        t.insert("embed.frame_pos".into(), Tensor::random_normal(&[config.max_frames, d], 0.1, rng));
        t.insert("embed.patch_pos".into(), Tensor::random_normal(&[config.patch_tokens(), d], 0.1, rng));
        for l in 0..config.n_layers {
            let p = |n: &str| format!("layers.{l}.{n}");
            t.insert(p("ln1.gamma"), Tensor::full(&[d], 1.0));
            t.insert(p("ln1.beta"), Tensor::zeros(&[d]));
            for w in ["wq", "wk", "wv", "wo"] {
                t.insert(p(&format!("attn.{w}")), Tensor::random_normal(&[d, d], xavier(d), rng));
            }
            for b in ["bq", "bk", "bv", "bo"] {
                t.insert(p(&format!("attn.{b}")), Tensor::zeros(&[d]));
            }
            t.insert(p("ln2.gamma"), Tensor::full(&[d], 1.0));
            t.insert(p("ln2.beta"), Tensor::zeros(&[d]));
            t.insert(p("mlp.w1"), Tensor::random_normal(&[d, h], xavier(d), rng));
            t.insert(p("mlp.b1"), Tensor::zeros(&[h]));
            t.insert(p("mlp.w2"), Tensor::random_normal(&[h, d], xavier(h), rng));
            t.insert(p("mlp.b2"), Tensor::zeros(&[d]));
        }
        t.insert("final_ln.gamma".into(), Tensor::full(&[d], 1.0));
        t.insert("final_ln.beta".into(), Tensor::zeros(&[d]));

        let head_std = 0.1 * xavier(d);
        t.insert("head.camera.w".into(), Tensor::random_normal(&[d, CAMERA_DIM], head_std, rng));
        t.insert(
            "head.camera.b".into(),
            Tensor::vector(vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0]),
        );
        for (name, width, bias) in [("depth", s2, 1.0), ("points", 3 * s2, 0.0), ("motion", s2, -1.0), ("conf", s2, 0.0)] {
            t.insert(format!("head.{name}.w"), Tensor::random_normal(&[d, width], head_std, rng));
            t.insert(format!("head.{name}.b"), Tensor::full(&[width], bias));
        }
        Ok(Params { config: config.clone(), tensors: t })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.tensors.get(name).unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        match self.tensors.get(name) {
            Some(old) if old.shape() == value.shape() => {
                self.tensors.insert(name.to_string(), value);
                Ok(())
            }
            Some(old) => Err(Error::dim("Params::insert", format!("{name}: {:?} vs {:?}", old.shape(), value.shape()))),
            None => Err(Error::contract(format!("unknown parameter {name}"))),
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn layer(&self, l: usize) -> LayerParams<'_> {
        LayerParams::new(self, l)
    }

    /// Registers every parameter as a `requires_grad` leaf.
    pub fn on_tape(&self, tape: &Tape) -> ParamVars {
        ParamVars {
            n_heads: self.config.n_heads,
            vars: self.tensors.iter().map(|(k, v)| (k.clone(), tape.param(v.clone()))).collect(),
        }
    }

    /// Writes one MRT1 file per tensor plus `manifest.json`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut entries = BTreeMap::new();
        for (name, t) in &self.tensors {
            let file = format!("{name}.mrt");
            write_mrt1(dir.join(&file), t)?;
            entries.insert(name.clone(), ManifestEntry { file, shape: t.shape().to_vec() });
        }
        let manifest = Manifest { config: self.config.clone(), tensors: entries };
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
        manifest.config.validate()?;
        let mut tensors = BTreeMap::new();
        for (name, entry) in manifest.tensors {
            let t = read_mrt1(dir.join(&entry.file))?;
            if t.shape() != entry.shape.as_slice() {
                return Err(Error::Format(format!("{name}: manifest shape {:?} vs file {:?}", entry.shape, t.shape())));
            }
            tensors.insert(name, t);
        }
        let reference = Params::init(&manifest.config, &mut crate::rng::seeded(0))?;
        for (name, t) in &reference.tensors {
            match tensors.get(name) {
                Some(v) if v.shape() == t.shape() => {}
                _ => return Err(Error::Format(format!("parameter {name} missing or mis-shaped"))),
            }
        }
        Ok(Params { config: manifest.config, tensors })
    }
}

/// Tape handles for every parameter, keyed like [`Params`].
pub struct ParamVars {
    n_heads: usize,
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Var {
        *self.vars.get(name).unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn layer(&self, l: usize) -> LayerVars {
        LayerVars::new(self, l)
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }
}
