//! Versioned JSON checkpoints shared by both training stages.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::policy::{PolicyParams, PolicySnapshot};
use crate::rng::Rng;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Hex SHA-256 of the canonical JSON encoding of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Hex SHA-256 of a file's bytes.
pub fn file_digest(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    /// Stage that produced the checkpoint, e.g. `hft` or `hgrpo`.
    pub stage: String,
    pub config_hash: String,
    pub params: PolicyParams,
    /// State of the stage's driver RNG after its last draw.
    pub rng_state: Rng,
}

impl Checkpoint {
    pub fn new(stage: &str, config_hash: String, params: PolicyParams, rng_state: Rng) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            stage: stage.to_string(),
            config_hash,
            params,
            rng_state,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_slice(&std::fs::read(path)?)?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "checkpoint {} has version {}, expected {CHECKPOINT_VERSION}",
                path.display(),
                ckpt.version
            )));
        }
        if ckpt.params.values.len() != ckpt.params.dims.param_count() || !ckpt.params.is_finite() {
            return Err(Error::Config(format!("checkpoint {} has malformed parameters", path.display())));
        }
        Ok(ckpt)
    }

    pub fn snapshot(&self) -> PolicySnapshot {
        PolicySnapshot::new(self.params.clone())
    }
}
