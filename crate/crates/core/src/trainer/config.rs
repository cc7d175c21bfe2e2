use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    /// Cross-entropy only; no discriminator.
    Mce,
    /// Non-saturating adversarial loss alone.
    Adversarial,
    /// Weighted cross-entropy plus the adversarial loss.
    Hybrid,
}

impl Scheme {
    pub const ALL: [Scheme; 3] = [Scheme::Mce, Scheme::Adversarial, Scheme::Hybrid];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Mce => "mce",
            Scheme::Adversarial => "adversarial",
            Scheme::Hybrid => "hybrid",
        }
    }

    pub fn uses_discriminator(self) -> bool {
        self != Scheme::Mce
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scheme::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown scheme {s:?} (expected mce, adversarial or hybrid)")))
    }
}

/// Optimization protocol. Defaults are the full-scale values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub batch_size: usize,
    /// Initial segmentor learning rate.
    pub lr0_s: f64,
    /// The segmentor learning rate halves every this many epochs.
    pub halve_every: usize,
    /// Constant discriminator learning rate.
    pub lr_d: f64,
    /// Discriminator updates per segmentor update.
    pub k: usize,
    pub scheme: Scheme,
    pub hybrid_mce_weight: f64,
    pub seed: u64,
    /// Probability that a batch slot is drawn from the lesion-bearing pool.
    pub p_pos: f64,
    /// Apply random augmentation to training batches.
    pub augment: bool,
    /// Global gradient-norm cap; off unless set.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 225,
            batches_per_epoch: 80,
            batch_size: 5,
            lr0_s: 1e-5,
            halve_every: 75,
            lr_d: 1e-5,
            k: 3,
            scheme: Scheme::Adversarial,
            hybrid_mce_weight: 0.5,
            seed: 0,
            p_pos: 0.7,
            augment: true,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: usize| {
            if v == 0 {
                Err(Error::Config(format!("train.{name} must be at least 1")))
            } else {
                Ok(())
            }
        };
        positive("epochs", self.epochs)?;
        positive("batches_per_epoch", self.batches_per_epoch)?;
        positive("batch_size", self.batch_size)?;
        positive("halve_every", self.halve_every)?;
        positive("k", self.k)?;
        for (name, v) in [("lr0_s", self.lr0_s), ("lr_d", self.lr_d)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("train.{name} = {v} must be positive")));
            }
        }
        if !(self.hybrid_mce_weight.is_finite() && self.hybrid_mce_weight >= 0.0) {
            return Err(Error::Config(format!(
                "train.hybrid_mce_weight = {} must be non-negative",
                self.hybrid_mce_weight
            )));
        }
        if !(0.0..=1.0).contains(&self.p_pos) {
            return Err(Error::Config(format!("train.p_pos = {} must lie in [0, 1]", self.p_pos)));
        }
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::Config(format!("train.grad_clip = {c} must be positive")));
            }
        }
        Ok(())
    }
}

/// Segmentor learning rate for `epoch`: `lr0_s * 0.5^floor(epoch / halve_every)`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(Error::Contract(format!(
            "epoch {epoch} outside the schedule of {} epochs",
            cfg.epochs
        )));
    }
    Ok(cfg.lr0_s * 0.5f64.powi((epoch / cfg.halve_every) as i32))
}
