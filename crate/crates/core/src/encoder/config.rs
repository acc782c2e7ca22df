use serde::{Deserialize, Serialize};

use super::augment::AugmentConfig;
use super::network::{Architecture, DEFAULT_LEAKY_SLOPE};
use crate::error::{Error, Result};
use crate::loss::{LossWeights, DEFAULT_TAU};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Raw batch paired with its normalized variant.
    Ours,
    /// Two independently normalized views; the raw batch is not fed.
    Contrastive,
    /// Cross entropy on the raw batch only.
    CeOnly,
}

impl TrainMode {
    pub fn uses_pairing(self) -> bool {
        !matches!(self, TrainMode::CeOnly)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub filters: Vec<usize>,
    /// Must equal the last entry of `filters`.
    pub embed_dim: usize,
    pub n_classes: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { filters: vec![8, 16, 32], embed_dim: 32, n_classes: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub tau: f64,
    pub w_c: f64,
    pub w_e: f64,
    pub batch_size: usize,
    pub image_side: usize,
    pub epochs: usize,
    pub lr_initial: f64,
    /// First epoch (0-based) trained at `lr_dropped`.
    pub lr_drop_epoch: usize,
    pub lr_dropped: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub seed: u64,
    pub mode: TrainMode,
    pub encoder: EncoderConfig,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            w_c: 1.0,
            w_e: 1.0,
            batch_size: 20,
            image_side: 32,
            epochs: 60,
            lr_initial: 1e-4,
            lr_drop_epoch: 35,
            lr_dropped: 1e-5,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            seed: 0,
            mode: TrainMode::Ours,
            encoder: EncoderConfig::default(),
            augment: AugmentConfig::default(),
        }
    }
}

fn field_error(field: &str, msg: impl std::fmt::Display) -> Error {
    Error::InvalidArgument(format!("{field}: {msg}"))
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text).map_err(|e| Error::InvalidArgument(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(field_error("tau", format!("must be positive, got {}", self.tau)));
        }
        for (name, w) in [("w_c", self.w_c), ("w_e", self.w_e)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(field_error(name, format!("must be non-negative, got {w}")));
            }
        }
        if self.batch_size == 0 || (self.mode.uses_pairing() && self.batch_size < 2) {
            return Err(field_error("batch_size", format!("must be at least 2 for mode {:?}, got {}", self.mode, self.batch_size)));
        }
        if self.image_side < 2 {
            return Err(field_error("image_side", format!("must be at least 2, got {}", self.image_side)));
        }
        for (name, lr) in [("lr_initial", self.lr_initial), ("lr_dropped", self.lr_dropped)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(field_error(name, format!("must be positive, got {lr}")));
            }
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(field_error(name, format!("must lie in [0, 1), got {b}")));
            }
        }
        let enc = &self.encoder;
        if enc.filters.is_empty() || enc.filters.contains(&0) {
            return Err(field_error("encoder.filters", format!("must be non-empty and positive, got {:?}", enc.filters)));
        }
        if enc.filters.last() != Some(&enc.embed_dim) {
            return Err(field_error(
                "encoder.embed_dim",
                format!("must equal the last filter count {}, got {}", enc.filters.last().unwrap(), enc.embed_dim),
            ));
        }
        if enc.n_classes < 2 {
            return Err(field_error("encoder.n_classes", format!("must be at least 2, got {}", enc.n_classes)));
        }
        self.augment.validate()
    }

    /// Learning rate for a 0-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch < self.lr_drop_epoch {
            self.lr_initial
        } else {
            self.lr_dropped
        }
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            image_side: self.image_side,
            filters: self.encoder.filters.clone(),
            n_classes: self.encoder.n_classes,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights { tau: self.tau, w_c: self.w_c, w_e: self.w_e }
    }
}
