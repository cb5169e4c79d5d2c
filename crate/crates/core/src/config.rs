//! Run configuration shared by every workflow.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::ModelConfig;
use crate::motion::StatsScope;
use crate::scene::SceneSpec;
use crate::stream::StreamConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionLossKind {
    #[default]
    Hinge,
    Kl,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupervisedLayers {
    #[default]
    Last,
    All,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Linear warm-up, then cosine decay to zero at the last step.
    #[default]
    Cosine,
}

/// Image tokens over which the camera attention row is renormalized and supervised.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionScope {
    #[default]
    CurrentFrame,
    AllVisible,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub schedule: LrSchedule,
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub min_frames: usize,
    pub max_frames: usize,
    /// Scene variants (jittered object placement) sampled during training.
    pub scene_variants: usize,
    pub snapshot_every: usize,
    pub attention_loss: AttentionLossKind,
    pub supervised_layers: SupervisedLayers,
    pub attention_scope: AttentionScope,
    /// Append duplicate camera tokens and supervise their refined cameras.
    pub dual_path: bool,
    /// Divide the confidence terms by the pixel count.
    pub normalize_conf: bool,
}

impl TrainConfig {
    /// Learning rate used for the update at `step` (0-based).
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                let span = self.steps.saturating_sub(self.warmup_steps).max(1) as f64;
                let x = (step - self.warmup_steps) as f64 / span;
                0.5 * self.lr * (1.0 + (std::f64::consts::PI * x).cos())
            }
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 500,
            lr: 1e-3,
            optimizer: OptimizerKind::Adam,
            schedule: LrSchedule::Cosine,
            warmup_steps: 25,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            min_frames: 2,
            max_frames: 6,
            scene_variants: 4,
            snapshot_every: 50,
            attention_loss: AttentionLossKind::Hinge,
            supervised_layers: SupervisedLayers::Last,
            attention_scope: AttentionScope::CurrentFrame,
            dual_path: true,
            normalize_conf: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub rpe_delta: usize,
    /// Background tiles per side in the oracle segmentation.
    pub seg_tiles: usize,
    pub stats_scope: StatsScope,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { rpe_delta: 1, seg_tiles: 4, stats_scope: StatsScope::PerPair }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Seed of the fixed patch embedding used to tokenize pixels.
    pub embed_seed: u64,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub stream: StreamConfig,
    pub train: TrainConfig,
    pub scene: SceneSpec,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            embed_seed: 1,
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            stream: StreamConfig::default(),
            train: TrainConfig::default(),
            scene: SceneSpec::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.stream.validate()?;
        self.scene.validate()?;
        let t = &self.train;
        if t.min_frames < 2 || t.max_frames < t.min_frames {
            return Err(Error::Config("train frames need 2 <= min_frames <= max_frames".into()));
        }
        if t.max_frames > self.scene.frames {
            return Err(Error::Config(format!(
                "train.max_frames {} exceeds scene.frames {}",
                t.max_frames, self.scene.frames
            )));
        }
        if t.max_frames > self.model.max_frames {
            return Err(Error::Config("train.max_frames exceeds model.max_frames".into()));
        }
        if !(t.lr > 0.0) || !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) || !(t.eps > 0.0) {
            return Err(Error::Config("invalid optimizer hyperparameters".into()));
        }
        if t.scene_variants == 0 || t.snapshot_every == 0 {
            return Err(Error::Config("scene_variants and snapshot_every must be positive".into()));
        }
        let (m, s) = (&self.model, &self.scene);
        if (m.image_height, m.image_width, m.patch_size) != (s.height, s.width, s.patch_size) {
            return Err(Error::Config("scene and model image geometry differ".into()));
        }
        if self.eval.rpe_delta == 0 || self.eval.seg_tiles == 0 {
            return Err(Error::Config("eval.rpe_delta and eval.seg_tiles must be positive".into()));
        }
        Ok(())
    }

    /// Applies `key.path=value` overrides. Values parse as JSON, falling back
    /// to a plain string; keys must already exist.
    pub fn with_overrides<S: AsRef<str>>(&self, sets: &[S]) -> Result<Self> {
        let mut doc = serde_json::to_value(self)?;
        for s in sets {
            let s = s.as_ref();
            let (path, raw) = s.split_once('=').ok_or_else(|| Error::Config(format!("override `{s}` lacks `=`")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let mut node = &mut doc;
            let keys: Vec<&str> = path.split('.').collect();
            for (i, key) in keys.iter().enumerate() {
                let obj = node
                    .as_object_mut()
                    .ok_or_else(|| Error::Config(format!("`{}` is not a section", keys[..i].join("."))))?;
                if !obj.contains_key(*key) {
                    return Err(Error::Config(format!("unknown config key `{path}`")));
                }
                node = obj.entry(key.to_string()).or_insert(Value::Null);
            }
            *node = value;
        }
        serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn overrides_apply_and_reject_unknown_keys() {
        let c = RunConfig::default()
            .with_overrides(&["train.steps=10", "stream.window=3", "loss.c=0.25", "stream.init_mode=frame_pair"])
            .unwrap();
        assert_eq!(c.train.steps, 10);
        assert_eq!(c.stream.window, Some(3));
        assert_eq!(c.loss.c, 0.25);
        assert_eq!(c.stream.init_mode, crate::stream::InitMode::FramePair);
        assert!(RunConfig::default().with_overrides(&["train.stepz=1"]).is_err());
        assert!(RunConfig::default().with_overrides(&["seed"]).is_err());
    }

    #[test]
    fn json_round_trip_and_unknown_fields() {
        let c = RunConfig::default();
        let back = RunConfig::from_json(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        assert!(RunConfig::from_json(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn geometry_mismatch_is_rejected() {
        let c = RunConfig::default().with_overrides(&["scene.patch_size=2"]).unwrap();
        assert!(c.validate().is_err());
    }
}
