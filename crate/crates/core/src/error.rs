use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed json in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("line {line}: label {label:?} is not in the manifest")]
    UnknownLabel { line: usize, label: String },
    #[error("line {line}: {message}")]
    Record { line: usize, message: String },
    #[error("class {class:?} has {available} examples, {required} required")]
    InsufficientClass {
        class: String,
        available: usize,
        required: usize,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("token id {id} outside vocabulary of size {size}")]
    OutOfVocab { id: usize, size: usize },
    #[error("label {0:?} does not belong to the input's domain")]
    ForeignLabel(String),
    #[error("label token for {0:?} has not been registered")]
    UnregisteredLabel(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("sampling failed: {0}")]
    Sampling(String),
    #[error("missing parameter {0:?}")]
    MissingParam(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }
}
