use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("lookup error: unknown id {0:?}")]
    Lookup(String),

    #[error("image format error in {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite loss in epoch {epoch}, batch {batch}: term {term} = {value}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        term: String,
        value: f32,
    },

    #[error("cannot read {path}: {source}")]
    DataIo {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Coarse failure classes, used by front ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Bad configuration, arguments, or a model/checkpoint shape conflict.
    Config,
    /// Missing, malformed, or insufficient input data.
    Data,
    /// Training diverged.
    Numerical,
    /// Anything else, typically write failures.
    Io,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::Dimension(_) | Error::Checkpoint(_) | Error::Contract(_) => {
                ErrorClass::Config
            }
            Error::Validation(_)
            | Error::InsufficientData(_)
            | Error::Parse { .. }
            | Error::Lookup(_)
            | Error::Image { .. }
            | Error::DegenerateBatch(_)
            | Error::DataIo { .. } => ErrorClass::Data,
            Error::NonFinite { .. } => ErrorClass::Numerical,
            Error::Io(_) | Error::Json(_) => ErrorClass::Io,
        }
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
}
