use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdamConfig, AdamState, ModelConfig, ModelError, ParamStore, SeqRecModel};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint encoding: {0}")]
    Json(#[from] serde_json::Error),
    #[error("checkpoint format version {found}, this build reads {expected}")]
    Version { found: u32, expected: u32 },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Everything needed to resume: architecture, parameters, optimizer moments,
/// and free-form training state (hyperparameters, counters, seeds).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub model: ModelConfig,
    pub params: ParamStore,
    pub optimizer: Option<(AdamConfig, AdamState)>,
    pub training: serde_json::Value,
}

impl Checkpoint {
    pub fn new(model: &SeqRecModel, optimizer: Option<(AdamConfig, AdamState)>, training: serde_json::Value) -> Self {
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            model: model.config().clone(),
            params: model.params().clone(),
            optimizer,
            training,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let mut out = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut out, self)?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        let value: serde_json::Value = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        let found = value.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if found != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version {
                found,
                expected: CHECKPOINT_VERSION,
            });
        }
        Ok(serde_json::from_value(value)?)
    }

    pub fn to_model(&self) -> Result<SeqRecModel, CheckpointError> {
        Ok(SeqRecModel::from_parts(self.model.clone(), self.params.clone())?)
    }
}
