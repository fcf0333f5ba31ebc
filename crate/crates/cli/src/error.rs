use std::path::PathBuf;
use std::process::ExitCode;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("data: {0}")]
    Data(String),
    #[error(transparent)]
    Core(#[from] mode_core::Error),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }

    /// 2 for configuration problems, 3 for data and IO, 4 for numeric failure.
    pub fn exit_code(&self) -> ExitCode {
        use mode_core::Error as E;
        ExitCode::from(match self {
            CliError::Config(_) => 2,
            CliError::Io { .. } | CliError::Data(_) => 3,
            CliError::Core(E::Numeric(_)) => 4,
            CliError::Core(E::Data(_) | E::Domain(_)) => 3,
            CliError::Core(_) => 2,
        })
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
