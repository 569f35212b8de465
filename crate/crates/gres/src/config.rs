//! Run configuration, read from a sectioned TOML file.
//!
//! Every key is optional; omitted keys take the defaults below. Unknown keys
//! are rejected. See `configs/desk.toml` for a fully commented example.

use std::path::Path;

use gres_core::config::ModelConfig;
use gres_core::optim::AdamWConfig;
use gres_core::synth::{DatasetSpec, Mix};
use serde::{Deserialize, Serialize};

use crate::error::{io_at, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub ablation: AblationConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_count: usize,
    pub val_count: usize,
    /// Dataset seed, independent of the training seed so every run of an
    /// ablation sees the same samples.
    pub seed: u64,
    pub min_objects: usize,
    pub max_objects: usize,
    pub mix: Mix,
}

impl Default for DataConfig {
    fn default() -> Self {
        let spec = DatasetSpec::default();
        Self {
            train_count: 2000,
            val_count: 500,
            seed: 1234,
            min_objects: spec.min_objects,
            max_objects: spec.max_objects,
            mix: spec.mix,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: u64,
    pub batch_size: usize,
    /// Validate every this many epochs (0 disables).
    pub eval_every: u64,
    /// Write a step record every this many steps.
    pub log_every: u64,
    pub optimizer: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 10, batch_size: 16, eval_every: 5, log_every: 10, optimizer: AdamWConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
    /// Arms: `naive`, `rsh`, `rsh_mmd`, `full`, or `nt<X>` for the full
    /// model with no-target supervision depth X.
    pub arms: Vec<String>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self { seeds: vec![0, 1, 2], arms: ["naive", "rsh", "rsh_mmd", "full"].map(String::from).to_vec() }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_at(path))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            image_size: self.model.image_size,
            min_objects: self.data.min_objects,
            max_objects: self.data.max_objects,
            mix: self.data.mix,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.dataset_spec().validate()?;
        self.train.optimizer.validate()?;
        if self.train.epochs == 0 || self.train.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if self.data.train_count == 0 {
            return Err(Error::Config("train_count must be positive".into()));
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.model.seed = seed;
        self
    }
}
