use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A tensor axis did not have the size an operation required.
    #[error("{op}: axis `{axis}` expected {expected}, got {actual}")]
    Dimension {
        op: &'static str,
        axis: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("{op}: crop window lies entirely outside the map")]
    EmptyCrop { op: &'static str },

    /// A caller broke an operation's preconditions.
    #[error("contract violated: {0}")]
    Contract(String),

    #[error("target encoding: {0}")]
    Encoding(String),

    #[error("non-finite value in loss term `{part}`")]
    NonFinite { part: &'static str },

    #[error("{path}:{line}: {msg}")]
    Ingestion {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("incompatible checkpoint: {0}")]
    Version(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed tensor stream: {0}")]
    Format(String),

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, axis: &'static str, expected: usize, actual: usize) -> Self {
        Error::Dimension {
            op,
            axis,
            expected,
            actual,
        }
    }
}
