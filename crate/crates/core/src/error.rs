use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error at layer {layer}: {message}")]
    Layer { layer: usize, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("malformed {kind} data: {message}")]
    Format { kind: &'static str, message: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("single-class input: {0}")]
    SingleClass(String),

    #[error("empty split: {0}")]
    EmptySplit(String),

    #[error("scan {scan_id} rejected: {reason}")]
    ScanRejected { scan_id: String, reason: String },

    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error in {}: {source}", path.display())]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>, source: csv::Error) -> Self {
        Error::Csv { path: path.into(), source }
    }

    pub(crate) fn format(kind: &'static str, message: impl Into<String>) -> Self {
        Error::Format { kind, message: message.into() }
    }
}
