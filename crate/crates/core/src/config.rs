//! The TOML run configuration: one table per module, every key optional.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decoding::ReconstructParams;
use crate::loss::HybridLossConfig;
use crate::model::Stage1Config;
use crate::optim::AdamWConfig;
use crate::synth::SynthConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub lr_init: f64,
    pub lr_min: f64,
    /// Summed frames per batch.
    pub frame_cap: usize,
    pub alpha: f64,
    pub label_smoothing: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Batch order shuffling; model initialization uses `model.seed`.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamWConfig::default();
        let loss = HybridLossConfig::default();
        Self {
            epochs: 50,
            warmup_epochs: 5,
            lr_init: 1e-3,
            lr_min: 1e-6,
            frame_cap: 1800,
            alpha: loss.alpha,
            label_smoothing: loss.label_smoothing,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            weight_decay: adam.weight_decay,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.epochs == 0 {
            return bad("train.epochs must be positive".into());
        }
        if self.warmup_epochs >= self.epochs {
            return bad(format!(
                "train.warmup_epochs ({}) must be below train.epochs ({})",
                self.warmup_epochs, self.epochs
            ));
        }
        if !(self.lr_init > 0.0) || !(self.lr_min >= 0.0) || self.lr_min > self.lr_init {
            return bad(format!("need 0 <= lr_min <= lr_init and lr_init > 0, got {} / {}", self.lr_min, self.lr_init));
        }
        if self.frame_cap == 0 {
            return bad("train.frame_cap must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("AdamW needs betas in [0, 1) and eps > 0".into());
        }
        self.loss().validate().map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn loss(&self) -> HybridLossConfig {
        HybridLossConfig {
            alpha: self.alpha,
            label_smoothing: self.label_smoothing,
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmConfig {
    pub order: usize,
    pub discount: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self { order: 2, discount: 0.5 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: Stage1Config,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub decode: ReconstructParams,
    pub lm: LmConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.model.validate().map_err(|e| inv(&e))?;
        self.train.validate()?;
        self.synth.validate().map_err(|e| inv(&e))?;
        self.decode.validate().map_err(|e| inv(&e))?;
        if self.lm.order == 0 || !(self.lm.discount > 0.0 && self.lm.discount < 1.0) {
            return Err(ConfigError::Invalid("lm.order must be >= 1 and lm.discount in (0, 1)".into()));
        }
        Ok(())
    }
}
