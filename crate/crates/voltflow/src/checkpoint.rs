//! Versioned checkpoints. A checkpoint is self-describing — loading needs no
//! external configuration — and records the RNG state so interrupted
//! pipelines resume deterministically.

use crate::config::RunConfig;
use crate::flow::VelocityField;
use crate::fno::FnoModel;
use crate::hierarchy::Hierarchy;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

/// Bump on any change to the serialized layout.
pub const CHECKPOINT_VERSION: &str = "voltflow-checkpoint-v1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("cannot access checkpoint {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot decode checkpoint {path}: {source}")]
    Decode {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("cannot encode checkpoint: {0}")]
    Encode(#[source] serde_json::Error),
    #[error("checkpoint {path} has version {found}, expected {expected}")]
    VersionMismatch { path: String, found: String, expected: String },
}

/// Everything a resumed run needs: models, hierarchy state, the config
/// snapshot, and the RNG mid-stream state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: String,
    /// Which stages have completed when this was written.
    pub completed_stage: u8,
    pub config: RunConfig,
    pub fno: Option<FnoModel>,
    pub field: Option<VelocityField>,
    pub hierarchy: Option<Hierarchy>,
    pub rng: ChaCha8Rng,
}

impl Checkpoint {
    pub fn new(config: RunConfig, rng: ChaCha8Rng) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION.into(),
            completed_stage: 0,
            config,
            fno: None,
            field: None,
            hierarchy: None,
            rng,
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)
                .map_err(|source| CheckpointError::Io { path: dir.display().to_string(), source })?;
        }
        let body = serde_json::to_vec(self).map_err(CheckpointError::Encode)?;
        std::fs::write(path, body)
            .map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
        // Peek at the version before decoding the full payload so a layout
        // change produces a version error, not a field error.
        #[derive(Deserialize)]
        struct Header {
            version: String,
        }
        let header: Header = serde_json::from_str(&text)
            .map_err(|source| CheckpointError::Decode { path: path.display().to_string(), source })?;
        if header.version != CHECKPOINT_VERSION {
            return Err(CheckpointError::VersionMismatch {
                path: path.display().to_string(),
                found: header.version,
                expected: CHECKPOINT_VERSION.into(),
            });
        }
        serde_json::from_str(&text)
            .map_err(|source| CheckpointError::Decode { path: path.display().to_string(), source })
    }
}
