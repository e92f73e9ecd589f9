//! Training configuration: JSON file with defaults, overridable per field.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::NetworkConfig;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl std::str::FromStr for Precision {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::usage(format!("unknown precision '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainConfig {
    pub network: NetworkConfig,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Volumes whose gradients are accumulated into one optimizer step.
    pub batch: usize,
    pub seed: u64,
    pub precision: Precision,
    pub manifest: PathBuf,
    pub out_dir: PathBuf,
    /// Also capture attention matrices during training forward passes.
    pub capture_attention: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            network: NetworkConfig::default(),
            epochs: 150,
            lr: 1e-4,
            weight_decay: 1e-5,
            batch: 1,
            seed: 7,
            precision: Precision::F32,
            manifest: PathBuf::from("data/manifest.json"),
            out_dir: PathBuf::from("runs/default"),
            capture_attention: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        if self.epochs < 1 {
            return Err(Error::config("epochs must be >= 1"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config("learning rate must be positive"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config("weight decay must be nonnegative"));
        }
        if self.batch < 1 {
            return Err(Error::config("batch must be >= 1"));
        }
        Ok(())
    }

    pub fn parse(json: &str) -> Result<TrainConfig> {
        let config: TrainConfig =
            serde_json::from_str(json).map_err(|e| Error::json("train config", e))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<TrainConfig> {
        let text =
            fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        TrainConfig::parse(&text)
    }
}
