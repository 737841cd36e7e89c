use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {dim} is {got}, expected {expected}")]
    Shape {
        op: &'static str,
        dim: &'static str,
        got: usize,
        expected: usize,
    },

    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },

    #[error("{op}: non-finite value encountered")]
    NonFinite { op: &'static str },

    #[error("tile origin {origin} is not a multiple of 8")]
    Alignment { origin: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("corpus: {0}")]
    Corpus(String),

    #[error("image {path}: {msg}")]
    Image { path: PathBuf, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Invalid {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag for the error class.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::Invalid { .. } => "invalid",
            Error::NonFinite { .. } => "non_finite",
            Error::Alignment { .. } => "alignment",
            Error::Checkpoint(_) => "checkpoint",
            Error::Corpus(_) => "corpus",
            Error::Image { .. } => "image",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}
