use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ServerState;
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Serialized search state. Floats are written in shortest round-trip form,
/// so loading and saving again reproduces the same bytes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub phase: String,
    pub state: ServerState,
}

impl Checkpoint {
    pub fn new(
        config_hash: impl Into<String>,
        seed: u64,
        phase: impl Into<String>,
        state: ServerState,
    ) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config_hash: config_hash.into(),
            seed,
            phase: phase.into(),
            state,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut text =
            serde_json::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))?;
        text.push('\n');
        Ok(text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        ck.state
            .model
            .topology
            .check_arch(&ck.state.arch)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let expected = crate::nn::ParamSet::zeros(&ck.state.model.topology.block_ops());
        if !expected.same_layout(&ck.state.model.params) {
            return Err(Error::Checkpoint(
                "parameter layout does not match the stored topology".into(),
            ));
        }
        ck.state
            .validate()
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_json(&text)
    }

    /// Hex sha256 of the serialized form.
    pub fn digest(&self) -> Result<String> {
        use sha2::{Digest, Sha256};
        Ok(hex::encode(Sha256::digest(self.to_json()?.as_bytes())))
    }
}
