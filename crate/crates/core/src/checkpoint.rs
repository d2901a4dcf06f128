//! Versioned, precision-tagged model checkpoints.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::state::ModelState;
use crate::training::{Ablation, StageRecord, TrainMode};

pub const FORMAT: &str = "resadapt-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub mode: TrainMode,
    pub seed: u64,
    pub ablation: Ablation,
    pub stages: Vec<StageRecord>,
    /// Effective run configuration.
    pub config: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint<T> {
    pub format: String,
    pub version: u32,
    pub scalar: String,
    pub meta: CheckpointMeta,
    pub state: ModelState<T>,
}

#[derive(Deserialize)]
struct Header {
    format: String,
    version: u32,
    scalar: String,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(state: ModelState<T>, meta: CheckpointMeta) -> Self {
        Self {
            format: FORMAT.to_string(),
            version: VERSION,
            scalar: T::NAME.to_string(),
            meta,
            state,
        }
    }

    /// Write to a sibling temporary file, then rename over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = serde_json::to_vec(self)?;
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_slice(&bytes)
    }

    pub fn from_slice(bytes: &[u8]) -> Result<Self> {
        let header: Header = serde_json::from_slice(bytes)?;
        if header.format != FORMAT {
            return Err(Error::Incompatible(format!("not a checkpoint ({:?})", header.format)));
        }
        if header.version != VERSION {
            return Err(Error::Incompatible(format!(
                "checkpoint version {} (expected {VERSION})",
                header.version
            )));
        }
        if header.scalar != T::NAME {
            return Err(Error::Incompatible(format!(
                "checkpoint stores {} parameters, loader expects {}",
                header.scalar,
                T::NAME
            )));
        }
        let ckpt: Self = serde_json::from_slice(bytes)?;
        ckpt.state.check_finite()?;
        Ok(ckpt)
    }
}

/// Scalar tag of a checkpoint file without decoding its parameters.
pub fn peek_scalar(path: &Path) -> Result<String> {
    let header: Header = serde_json::from_slice(&fs::read(path)?)?;
    Ok(header.scalar)
}
