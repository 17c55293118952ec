//! Training configuration and its line-oriented `key = value` file format.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::global::OrderingStrategy;

/// Region sequencing policy named in config files; the per-item random seed
/// is derived from the run seed at use time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OrderingKind {
    Confidence,
    BboxSize,
    Random,
}

impl OrderingKind {
    /// Concrete strategy for one item. Random ordering is seeded per item so
    /// repeated runs see identical sequences.
    pub fn strategy(self, run_seed: u64, item_index: usize) -> OrderingStrategy {
        match self {
            OrderingKind::Confidence => OrderingStrategy::Confidence,
            OrderingKind::BboxSize => OrderingStrategy::BboxSize,
            OrderingKind::Random => OrderingStrategy::Random(
                run_seed ^ (item_index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
            ),
        }
    }
}

impl fmt::Display for OrderingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            OrderingKind::Confidence => "confidence",
            OrderingKind::BboxSize => "bbox_size",
            OrderingKind::Random => "random",
        };
        f.write_str(name)
    }
}

impl FromStr for OrderingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "confidence" => Ok(OrderingKind::Confidence),
            "bbox_size" => Ok(OrderingKind::BboxSize),
            "random" => Ok(OrderingKind::Random),
            other => Err(Error::Config(format!(
                "unknown ordering {other:?} (expected confidence, bbox_size, or random)"
            ))),
        }
    }
}

/// All training hyperparameters. Desk-scale defaults; paper-scale values
/// stay expressible (joint_dim 2048, batch 128, and so on).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Joint embedding dimension D.
    pub joint_dim: usize,
    /// Raw region feature dimension; must match the corpus.
    pub feature_dim: usize,
    /// Number of stacked relationship-reasoning layers (0 disables them).
    pub rrr_layers: usize,
    pub ordering: OrderingKind,
    /// Hinge margin of the matching loss.
    pub margin: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_initial: f64,
    pub lr_decayed: f64,
    /// Last epoch that still uses the initial learning rate.
    pub decay_epoch: usize,
    pub use_generation_loss: bool,
    /// L2-normalize image and caption vectors before similarities.
    pub normalize_embeddings: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            joint_dim: 32,
            feature_dim: 64,
            rrr_layers: 4,
            ordering: OrderingKind::Confidence,
            margin: 0.2,
            batch_size: 16,
            epochs: 30,
            lr_initial: 2e-4,
            lr_decayed: 2e-5,
            decay_epoch: 15,
            use_generation_loss: true,
            normalize_embeddings: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Parse a config file: one `key = value` pair per line, `#` comments,
    /// unknown keys rejected. Missing keys keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut config = TrainConfig::default();
        for (line_no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value", line_no + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            let bad = |what: &str| {
                Error::Config(format!("line {}: bad {what} value {value:?}", line_no + 1))
            };
            match key {
                "joint_dim" => config.joint_dim = value.parse().map_err(|_| bad(key))?,
                "feature_dim" => config.feature_dim = value.parse().map_err(|_| bad(key))?,
                "rrr_layers" => config.rrr_layers = value.parse().map_err(|_| bad(key))?,
                "ordering" => config.ordering = value.parse()?,
                "margin" => config.margin = value.parse().map_err(|_| bad(key))?,
                "batch_size" => config.batch_size = value.parse().map_err(|_| bad(key))?,
                "epochs" => config.epochs = value.parse().map_err(|_| bad(key))?,
                "lr_initial" => config.lr_initial = value.parse().map_err(|_| bad(key))?,
                "lr_decayed" => config.lr_decayed = value.parse().map_err(|_| bad(key))?,
                "decay_epoch" => config.decay_epoch = value.parse().map_err(|_| bad(key))?,
                "use_generation_loss" => {
                    config.use_generation_loss = value.parse().map_err(|_| bad(key))?
                }
                "normalize_embeddings" => {
                    config.normalize_embeddings = value.parse().map_err(|_| bad(key))?
                }
                "seed" => config.seed = value.parse().map_err(|_| bad(key))?,
                other => {
                    return Err(Error::Config(format!(
                        "line {}: unknown key {other:?}",
                        line_no + 1
                    )))
                }
            }
        }
        config.validate()?;
        Ok(config)
    }

    /// Serialize in the file format; `parse` of the output reproduces the
    /// config exactly.
    pub fn to_config_string(&self) -> String {
        format!(
            "joint_dim = {}\n\
             feature_dim = {}\n\
             rrr_layers = {}\n\
             ordering = {}\n\
             margin = {}\n\
             batch_size = {}\n\
             epochs = {}\n\
             lr_initial = {}\n\
             lr_decayed = {}\n\
             decay_epoch = {}\n\
             use_generation_loss = {}\n\
             normalize_embeddings = {}\n\
             seed = {}\n",
            self.joint_dim,
            self.feature_dim,
            self.rrr_layers,
            self.ordering,
            self.margin,
            self.batch_size,
            self.epochs,
            self.lr_initial,
            self.lr_decayed,
            self.decay_epoch,
            self.use_generation_loss,
            self.normalize_embeddings,
            self.seed,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.joint_dim == 0 || self.feature_dim == 0 || self.batch_size == 0 || self.epochs == 0
        {
            return Err(Error::Config(
                "dimensions, batch size, and epochs must be positive".into(),
            ));
        }
        if self.decay_epoch > self.epochs {
            return Err(Error::Config(format!(
                "decay_epoch {} exceeds epochs {}",
                self.decay_epoch, self.epochs
            )));
        }
        if !(self.margin >= 0.0) {
            return Err(Error::Config(format!(
                "margin must be non-negative, got {}",
                self.margin
            )));
        }
        if !(self.lr_initial >= 0.0) || !(self.lr_decayed >= 0.0) {
            return Err(Error::Config(format!(
                "learning rates must be non-negative, got {} and {}",
                self.lr_initial, self.lr_decayed
            )));
        }
        Ok(())
    }
}
