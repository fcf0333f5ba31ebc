//! Checkpoints are canonical JSON: fixed field order, sorted maps and
//! shortest round-trip floats, so save -> load -> save is byte-identical.

use std::path::Path;

use mode_core::engine::{ModelAssembly, TtaEngine};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const FORMAT: &str = "mode-ctta-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum State {
    Initialized { model: ModelAssembly },
    Adapted { engine: TtaEngine },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub state: State,
}

impl Checkpoint {
    pub fn new(config_hash: String, seed: u64, state: State) -> Self {
        Self { format: FORMAT.into(), version: VERSION, config_hash, seed, state }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = serde_json::to_vec(self).map_err(|e| CliError::Data(e.to_string()))?;
        out.push(b'\n');
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let c: Self = serde_json::from_slice(bytes).map_err(|e| CliError::Data(format!("checkpoint: {e}")))?;
        if c.format != FORMAT || c.version != VERSION {
            return Err(CliError::Data(format!("unsupported checkpoint {} v{}", c.format, c.version)));
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::write_file(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Refuses a checkpoint produced under a different configuration.
    pub fn check_hash(&self, expected: &str) -> Result<()> {
        if self.config_hash != expected {
            return Err(CliError::Config(format!(
                "checkpoint config hash {} does not match config {}",
                self.config_hash, expected
            )));
        }
        Ok(())
    }
}
