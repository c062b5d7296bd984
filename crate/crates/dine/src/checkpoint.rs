//! Versioned JSON checkpoints. Floats are written with round-trip precision,
//! so a reload restores every parameter bit for bit.

use std::fs;
use std::path::Path;

use dine_core::models::{Architecture, SourceNet, TargetNet};
use serde::{Deserialize, Serialize};

use crate::error::{io_at, Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "net", rename_all = "snake_case")]
pub enum SavedNet {
    Source(SourceNet),
    Target(TargetNet),
}

impl SavedNet {
    pub fn architecture(&self) -> Architecture {
        match self {
            SavedNet::Source(n) => n.architecture(),
            SavedNet::Target(n) => n.architecture(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub architecture: Architecture,
    /// Seed the network was initialised and trained with.
    pub seed: u64,
    pub model: SavedNet,
}

impl Checkpoint {
    pub fn new(model: SavedNet, seed: u64) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            architecture: model.architecture(),
            seed,
            model,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(io_at(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_at(path))?;
        let ck: Checkpoint = serde_json::from_str(&text)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                what: "checkpoint",
                found: ck.version,
                expected: CHECKPOINT_VERSION,
            });
        }
        if ck.architecture != ck.model.architecture() {
            return Err(Error::Protocol("checkpoint architecture does not match its parameters".into()));
        }
        Ok(ck)
    }

    pub fn into_source(self) -> Result<SourceNet> {
        match self.model {
            SavedNet::Source(n) => Ok(n),
            SavedNet::Target(_) => Err(Error::Usage("expected a source checkpoint, found a target one".into())),
        }
    }

    pub fn into_target(self) -> Result<TargetNet> {
        match self.model {
            SavedNet::Target(n) => Ok(n),
            SavedNet::Source(_) => Err(Error::Usage("expected a target checkpoint, found a source one".into())),
        }
    }
}
