use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GfefError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: empty dataset file")]
    EmptyFile { path: PathBuf },

    #[error("{path}:{line}: expected {expected} values, found {found}")]
    RaggedRow {
        path: PathBuf,
        line: usize,
        expected: usize,
        found: usize,
    },

    #[error("{path}:{line}: field {field}: cannot parse {token:?} as a finite number")]
    BadToken {
        path: PathBuf,
        line: usize,
        field: usize,
        token: String,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training split is missing class {class} (of {num_classes})")]
    MissingClass { class: usize, num_classes: usize },

    #[error("series length {found} does not match model length {expected}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("series contains a non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, GfefError>;

impl GfefError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GfefError::Io {
            path: path.into(),
            source,
        }
    }
}
