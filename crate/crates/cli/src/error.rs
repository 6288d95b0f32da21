use std::path::PathBuf;

use thiserror::Error;

/// Failures of a CLI run. [`CliError::exit_code`] gives the process status.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad arguments, config values or missing prerequisites.
    #[error("{0}")]
    Validation(String),
    #[error(transparent)]
    Core(#[from] lesionforge::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// A check ran and failed.
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            _ => 2,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
