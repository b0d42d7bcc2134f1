use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("geometry: {0}")]
    Geometry(String),

    #[error("rendering: {0}")]
    Rendering(String),

    #[error("encoder: {0}")]
    Encoder(String),

    #[error("scoring: {0}")]
    Scoring(String),

    #[error("training: {0}")]
    Training(String),

    #[error("non-finite loss term `{term}` (value {value})")]
    NonFiniteLoss { term: &'static str, value: f64 },

    #[error("metrics: {0}")]
    Metrics(String),

    #[error("dataset: {0}")]
    Data(String),

    #[error("parse error in {path} at line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("io: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
