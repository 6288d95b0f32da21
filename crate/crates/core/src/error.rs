use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("empty manifest: {0}")]
    EmptyManifest(PathBuf),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("class {class} has {count} samples; {msg}")]
    ClassCount {
        class: String,
        count: usize,
        msg: &'static str,
    },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("input too small: {0}")]
    Undersized(String),
    #[error("feature table: {0}")]
    FeatureTable(String),
    #[error("weights file: {0}")]
    WeightsFormat(String),
    #[error("image: {0}")]
    Image(String),
    #[error("model is not trained: {0}")]
    Untrained(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
