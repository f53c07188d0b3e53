//! Run configuration: one JSON file fully captures an experiment, including
//! every seed, so reruns are bit-reproducible.

use segcascade_core::cascade::CascadePlan;
use segcascade_core::error::{Error, Result};
use segcascade_core::eval::LesionMatchParams;
use segcascade_core::phantom::PhantomSpec;
use segcascade_core::train::Augmentation;
use segcascade_core::labels::RegionId;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Paths {
    pub data_dir: PathBuf,
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CohortSizes {
    pub n_train: usize,
    pub n_val: usize,
}

impl Default for CohortSizes {
    fn default() -> Self {
        CohortSizes { n_train: 40, n_val: 15 }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PhantomSection {
    #[serde(flatten, default)]
    pub spec: PhantomSpec,
    #[serde(default)]
    pub cohort: CohortSizes,
}

/// Training hyperparameters; the seed is derived from the run seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub poly_exponent: f64,
    pub augmentation: Augmentation,
    pub presence_filter: Option<Vec<RegionId>>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let base = segcascade_core::train::TrainConfig::default();
        TrainSection {
            epochs: base.epochs,
            batch_size: base.batch_size,
            lr0: base.lr0,
            momentum: base.momentum,
            poly_exponent: base.poly_exponent,
            augmentation: base.augmentation,
            presence_filter: base.presence_filter,
        }
    }
}

impl TrainSection {
    pub fn to_train_config(&self, seed: u64) -> segcascade_core::train::TrainConfig {
        segcascade_core::train::TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr0: self.lr0,
            momentum: self.momentum,
            poly_exponent: self.poly_exponent,
            seed,
            augmentation: self.augmentation,
            presence_filter: self.presence_filter.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Resenc,
    Default,
    Lowres,
    MultiEnsemble,
    Cascade,
}

impl Architecture {
    pub fn as_str(self) -> &'static str {
        match self {
            Architecture::Resenc => "resenc",
            Architecture::Default => "default",
            Architecture::Lowres => "lowres",
            Architecture::MultiEnsemble => "multi_ensemble",
            Architecture::Cascade => "cascade",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictSplit {
    Train,
    Val,
    All,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    #[serde(default)]
    pub phantom: PhantomSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default = "default_folds")]
    pub folds: usize,
    pub architecture: Architecture,
    #[serde(default)]
    pub cascade: CascadePlan,
    #[serde(default = "default_lowres_factor")]
    pub lowres_factor: f64,
    #[serde(default)]
    pub eval: LesionMatchParams,
    #[serde(default = "default_bins")]
    pub histogram_bins: usize,
    #[serde(default = "default_split")]
    pub predict_split: PredictSplit,
}

fn default_folds() -> usize {
    5
}

fn default_lowres_factor() -> f64 {
    1.5
}

fn default_bins() -> usize {
    segcascade_core::normalize::DEFAULT_BINS
}

fn default_split() -> PredictSplit {
    PredictSplit::Val
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<RunConfig> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(Error::Config(format!("folds {} must be >= 2", self.folds)));
        }
        if self.lowres_factor < 1.0 {
            return Err(Error::Config(format!(
                "lowres_factor {} must be >= 1",
                self.lowres_factor
            )));
        }
        self.cascade.validate()?;
        self.train.to_train_config(0).validate()?;
        Ok(())
    }

    pub fn normalized_dir(&self) -> PathBuf {
        self.paths.output_dir.join("normalized")
    }

    pub fn checkpoints_dir(&self) -> PathBuf {
        self.paths.output_dir.join("checkpoints")
    }

    pub fn predictions_dir(&self) -> PathBuf {
        self.paths.output_dir.join("predictions").join(self.architecture.as_str())
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.paths.output_dir.join("reports").join(self.architecture.as_str())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn test_minimal_config_parses_with_defaults() {
        let json = r#"{
            "seed": 7,
            "paths": { "data_dir": "/tmp/d", "output_dir": "/tmp/o" },
            "architecture": "cascade"
        }"#;
        let cfg: RunConfig = serde_json::from_str(json).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.folds, 5);
        assert_eq!(cfg.train.epochs, 250);
        assert_eq!(cfg.train.momentum, 0.99);
        assert_eq!(cfg.phantom.cohort.n_train, 40);
        assert_eq!(cfg.lowres_factor, 1.5);
    }

    #[test]
    fn test_bad_folds_rejected() {
        let json = r#"{
            "seed": 7,
            "paths": { "data_dir": "/tmp/d", "output_dir": "/tmp/o" },
            "architecture": "resenc",
            "folds": 1
        }"#;
        let cfg: RunConfig = serde_json::from_str(json).unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn test_roundtrip_serialization() {
        let json = r#"{
            "seed": 1,
            "paths": { "data_dir": "/tmp/d", "output_dir": "/tmp/o" },
            "architecture": "multi_ensemble",
            "train": { "epochs": 3 }
        }"#;
        let cfg: RunConfig = serde_json::from_str(json).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.batch_size, 2); // untouched default
        let text = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back.train.epochs, 3);
    }
}
