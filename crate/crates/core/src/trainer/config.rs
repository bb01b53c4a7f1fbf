use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datapipe::Modality;
use crate::error::{Error, Result};
use crate::models::{Model, ModelConfig, Variant};
use crate::optim::DEFAULT_LR;

/// How manifest rows are divided into training and evaluation sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum SplitPolicy {
    /// Use the manifest's `split` column.
    Manifest,
    /// Per-class random holdout of `eval_fraction`, seeded.
    Stratified { eval_fraction: f64, seed: u64 },
    /// Hold out every row of one institution.
    Institution { holdout: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub manifest: Option<PathBuf>,
    pub modality: Modality,
    pub split: SplitPolicy,
    pub augment: bool,
    pub rebalance: bool,
    pub prefetch: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Stop after this many optimizer steps, if set.
    pub max_steps: Option<usize>,
    /// Run at most this many of the declared epochs, if set.
    pub max_epochs: Option<usize>,
    /// Samples per forward/backward pass; gradients are accumulated over the
    /// batch before each optimizer step. Bounds memory at large input sizes.
    pub micro_batch: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataSection,
    pub train: TrainSection,
    pub model: ModelConfig,
}

impl ExperimentConfig {
    /// 100 epochs, batch 8, lr 0.0006, 512×512 PET_CT, FCN + AggResCNN.
    pub fn paper_regime() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/canonical"),
            data: DataSection {
                manifest: None,
                modality: Modality::PetCt,
                split: SplitPolicy::Manifest,
                augment: true,
                rebalance: true,
                prefetch: true,
            },
            train: TrainSection {
                epochs: 100,
                batch_size: 8,
                lr: DEFAULT_LR,
                max_steps: None,
                max_epochs: None,
                micro_batch: Some(2),
            },
            model: ModelConfig::canonical(Variant::AggresCnn, 2).with_fcn(true),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string().replace('\n', " ")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        if self.train.batch_size == 0 || self.train.epochs == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if self.train.micro_batch == Some(0) {
            return Err(Error::Config("micro_batch must be positive".into()));
        }
        if !(self.train.lr >= 0.0 && self.train.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be finite and non-negative, got {}", self.train.lr)));
        }
        if self.model.input_channels != self.data.modality.channels() {
            return Err(Error::Config(format!(
                "modality {} has {} channel(s) but the model expects {}",
                self.data.modality,
                self.data.modality.channels(),
                self.model.input_channels
            )));
        }
        if let SplitPolicy::Stratified { eval_fraction, .. } = self.data.split {
            if !(0.0..1.0).contains(&eval_fraction) {
                return Err(Error::Config(format!("eval_fraction {eval_fraction} outside [0, 1)")));
            }
        }
        Model::build(&self.model).map(|_| ())
    }

    /// Epochs actually run.
    pub fn effective_epochs(&self) -> usize {
        self.train.max_epochs.map_or(self.train.epochs, |m| m.min(self.train.epochs))
    }
}
