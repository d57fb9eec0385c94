//! JSON checkpoints: model configuration, parameters, batch-norm statistics,
//! optimizer state and step.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::Adagrad;
use crate::error::{Error, Result};
use crate::model::{BasmModel, ModelConfig};
use crate::params::ParamStore;
use crate::stabt::RunningStats;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: ModelConfig,
    pub params: ParamStore,
    pub running: RunningStats,
    pub optimizer: Adagrad,
    pub step: u64,
}

impl Checkpoint {
    /// Fresh model with zeroed step count.
    pub fn init(config: ModelConfig, adagrad_init: f64) -> Result<Self> {
        let model = BasmModel::new(config)?;
        Ok(Self::from_model(&model, Adagrad::new(&model.params, adagrad_init), 0))
    }

    pub fn from_model(model: &BasmModel, optimizer: Adagrad, step: u64) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            config: model.config.clone(),
            params: model.params.clone(),
            running: model.running.clone(),
            optimizer,
            step,
        }
    }

    pub fn model(&self) -> Result<BasmModel> {
        BasmModel::from_parts(self.config.clone(), self.params.clone(), self.running.clone())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint =
            serde_json::from_str(text).map_err(|e| Error::Data(format!("invalid checkpoint: {e}")))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Data(format!(
                "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        ck.model()?;
        let names: Vec<&String> = ck.params.iter().map(|(n, _)| n).collect();
        let acc: Vec<&String> = ck.optimizer.accumulators.keys().collect();
        if names != acc {
            return Err(Error::Data("optimizer state does not match the parameters".into()));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Loads and rejects checkpoints written under a different configuration.
    pub fn load_for(path: &Path, expected: &ModelConfig) -> Result<Self> {
        let ck = Self::load(path)?;
        if &ck.config != expected {
            return Err(Error::Config(format!(
                "checkpoint {} was written for a different model configuration",
                path.display()
            )));
        }
        Ok(ck)
    }
}
