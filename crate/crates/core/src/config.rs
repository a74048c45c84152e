//! Run configuration: a strict JSON document (unknown keys rejected)
//! validated before any compute. Warm-up may be given in steps or epochs;
//! the epoch form is converted via steps-per-epoch and the resolved value
//! is logged in the run header.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::losses::{LossConfig, LossVariant};
use crate::memvir::{MemVirConfig, MemVirMode};
use crate::model::{OptimizerKind, OptimizerState};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// Generate clusters on the fly (seeded by its own `seed` field).
    Synthetic(SyntheticSpec),
    /// Load feature CSVs (gzip accepted by extension).
    Files { train: String, test: String },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_widths: Vec<usize>,
    pub embed_dim: usize,
    #[serde(default = "default_leaky_slope")]
    pub leaky_slope: f64,
}

fn default_leaky_slope() -> f64 {
    0.01
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSettings {
    pub variant: LossVariant,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// Cosine offset (CosFace) or angle in radians (ArcFace,
    /// CurricularFace); per-variant default when omitted.
    #[serde(default)]
    pub margin: Option<f64>,
    #[serde(default)]
    pub curricular_t: f64,
    #[serde(default = "default_pa_alpha")]
    pub proxy_anchor_alpha: f64,
    #[serde(default = "default_pa_delta")]
    pub proxy_anchor_delta: f64,
}

fn default_gamma() -> f64 {
    16.0
}

fn default_pa_alpha() -> f64 {
    32.0
}

fn default_pa_delta() -> f64 {
    0.1
}

impl LossSettings {
    pub fn to_loss_config(&self) -> LossConfig {
        let mut cfg = LossConfig::new(self.variant).with_gamma(self.gamma);
        if let Some(m) = self.margin {
            cfg = cfg.with_margin(m);
        }
        cfg.curricular_t = self.curricular_t;
        cfg.proxy_anchor_alpha = self.proxy_anchor_alpha;
        cfg.proxy_anchor_delta = self.proxy_anchor_delta;
        cfg
    }
}

/// Warm-up duration, in the unit the experiment is described in.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum WarmupSpec {
    Steps(usize),
    Epochs(usize),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemVirSettings {
    pub mode: MemVirMode,
    pub n_steps: usize,
    pub margin: usize,
    pub warmup: WarmupSpec,
}

impl MemVirSettings {
    pub fn warmup_in_steps(&self, steps_per_epoch: usize) -> usize {
        match self.warmup {
            WarmupSpec::Steps(s) => s,
            WarmupSpec::Epochs(e) => e * steps_per_epoch,
        }
    }

    pub fn to_memvir_config(&self, warmup_steps: usize) -> MemVirConfig {
        MemVirConfig {
            mode: self.mode,
            n_steps: self.n_steps,
            margin: self.margin,
            warmup_steps,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
}

fn default_momentum() -> f64 {
    0.9
}

impl OptimizerConfig {
    pub fn to_optimizer_state(&self, param_count: usize) -> OptimizerState {
        let mut opt = OptimizerState::new(self.kind, self.learning_rate, param_count);
        opt.momentum = self.momentum;
        opt
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub loss: LossSettings,
    pub memvir: MemVirSettings,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub classes_per_batch: usize,
    pub epochs: usize,
    pub eval_every: usize,
    #[serde(default = "default_recall_ks")]
    pub recall_ks: Vec<u32>,
    #[serde(default = "default_class_ratio")]
    pub class_ratio: f64,
    pub seed: u64,
    pub output_dir: String,
}

fn default_recall_ks() -> Vec<u32> {
    vec![1, 2, 4, 8]
}

fn default_class_ratio() -> f64 {
    1.0
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.classes_per_batch == 0 {
            return Err(Error::Config("batch_size and classes_per_batch must be >= 1".into()));
        }
        if self.batch_size % self.classes_per_batch != 0 {
            return Err(Error::Config(format!(
                "batch_size {} must be divisible by classes_per_batch {}",
                self.batch_size, self.classes_per_batch
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be >= 1".into()));
        }
        if self.recall_ks.is_empty() || self.recall_ks.contains(&0) {
            return Err(Error::Config("recall_ks must be nonempty, all >= 1".into()));
        }
        if !(self.class_ratio > 0.0 && self.class_ratio <= 1.0) {
            return Err(Error::Config(format!(
                "class_ratio must lie in (0, 1], got {}",
                self.class_ratio
            )));
        }
        if self.model.embed_dim == 0 {
            return Err(Error::Config("embed_dim must be >= 1".into()));
        }
        if !(self.optimizer.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if let DatasetConfig::Synthetic(spec) = &self.dataset {
            spec.validate()?;
        }
        self.loss.to_loss_config().validate()?;
        Ok(())
    }
}

/// Parses and validates a config file.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    let cfg: RunConfig = serde_json::from_str(&text)?;
    cfg.validate()?;
    Ok(cfg)
}
