//! Experiment driver for continual test-time adaptation with MoDE layers:
//! configuration, checkpoints, stream files, metrics reports and the
//! init/adapt pipeline behind the `mode-ctta` binary.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod pipeline;
pub mod report;
pub mod stream;

use std::path::Path;

pub use error::{CliError, Result};

/// Writes `bytes` to `path`, creating parent directories.
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}
