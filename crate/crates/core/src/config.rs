//! The JSON run configuration read by every command.
//!
//! Every section and field is optional and falls back to its default.
//! Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{AugmentSpec, CohortSpec, N_CHANNELS, N_CLASSES};
use crate::error::{Error, Result};
use crate::models::ModelConfig;
use crate::trainer::{Scheme, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CrossvalConfig {
    pub n_folds: usize,
    pub fold_seed: u64,
    /// Permutation used by the single-split `train` and `eval` commands.
    pub permutation: usize,
    pub schemes: Vec<Scheme>,
}

impl Default for CrossvalConfig {
    fn default() -> Self {
        CrossvalConfig {
            n_folds: 4,
            fold_seed: 0,
            permutation: 0,
            schemes: Scheme::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    /// Cross-validation permutation whose folds are reused.
    pub fold: usize,
    /// Fractions of the training subjects kept, strictly decreasing.
    pub sizes: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            fold: 0,
            sizes: vec![1.0, 0.5, 0.25],
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Dataset directory; the cohort is generated in memory when absent.
    pub dataset: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub cohort: CohortSpec,
    pub augment: AugmentSpec,
    pub crossval: CrossvalConfig,
    pub ablation: AblationConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("{}: {e}", origin.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg = Self::from_json(&text, path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Replace every seed in the configuration.
    pub fn override_seed(&mut self, seed: u64) {
        self.model.seed = seed;
        self.train.seed = seed;
        self.cohort.seed = seed;
        self.crossval.fold_seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.cohort.validate()?;
        self.augment.validate()?;
        if self.model.in_channels != N_CHANNELS || self.model.n_classes != N_CLASSES {
            return Err(Error::Config(format!(
                "model must take {N_CHANNELS} channels and emit {N_CLASSES} classes to match the data"
            )));
        }
        if self.cohort.image_size != self.model.image_size {
            return Err(Error::Config(format!(
                "cohort.image_size {} differs from model.image_size {}",
                self.cohort.image_size, self.model.image_size
            )));
        }
        let cv = &self.crossval;
        if cv.n_folds < 3 {
            return Err(Error::Config(format!("crossval.n_folds {} must be at least 3", cv.n_folds)));
        }
        if cv.permutation >= cv.n_folds {
            return Err(Error::Config(format!(
                "crossval.permutation {} must be below n_folds {}",
                cv.permutation, cv.n_folds
            )));
        }
        if cv.schemes.is_empty() {
            return Err(Error::Config("crossval.schemes is empty".into()));
        }
        for (i, s) in cv.schemes.iter().enumerate() {
            if cv.schemes[..i].contains(s) {
                return Err(Error::Config(format!("crossval.schemes lists {s} twice")));
            }
        }
        let ab = &self.ablation;
        if ab.fold >= cv.n_folds {
            return Err(Error::Config(format!(
                "ablation.fold {} must be below crossval.n_folds {}",
                ab.fold, cv.n_folds
            )));
        }
        if ab.seeds.is_empty() || ab.sizes.is_empty() {
            return Err(Error::Config("ablation needs at least one size and one seed".into()));
        }
        if ab.sizes.windows(2).any(|w| !(w[1] < w[0])) || ab.sizes.iter().any(|s| !(*s > 0.0 && *s <= 1.0)) {
            return Err(Error::Config(format!(
                "ablation.sizes {:?} must strictly decrease within (0, 1]",
                ab.sizes
            )));
        }
        if self.cohort.n_subjects_pos < cv.n_folds {
            return Err(Error::Config(format!(
                "{} positive subjects cannot fill {} folds",
                self.cohort.n_subjects_pos, cv.n_folds
            )));
        }
        Ok(())
    }
}
