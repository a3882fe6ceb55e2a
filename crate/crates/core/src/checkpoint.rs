//! On-disk training state.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::BlockData;
use crate::optim::OptimizerState;
use crate::trainer::TrainConfig;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    /// Joint epochs completed.
    pub epoch: usize,
    /// Optimizer steps taken in the joint phase.
    pub step: u64,
    pub config: TrainConfig,
    /// Training class counts the noise levels were derived from.
    pub census: Vec<u64>,
    pub input_dim: usize,
    /// `"<network>.<block>"` to shape and values.
    pub blocks: BTreeMap<String, BlockData>,
    pub optimizers: BTreeMap<String, OptimizerState>,
}

impl Checkpoint {
    pub fn classes(&self) -> usize {
        self.census.len()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "checkpoint version {} not supported (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = self.to_json()?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
