use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MomeError {
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic in {path}: expected {expected}")]
    BadMagic { path: PathBuf, expected: String },
    #[error("truncated payload in {path}: expected {expected} bytes, found {found}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("dimension mismatch in {path}: {detail}")]
    DimensionMismatch { path: PathBuf, detail: String },
    #[error("non-binary mask value {value} at offset {offset} in {path}")]
    NonBinary {
        path: PathBuf,
        offset: usize,
        value: u8,
    },
    #[error("class count mismatch: expected {expected}, found {found}")]
    ClassCount { expected: usize, found: usize },
    #[error("invalid label set: {0}")]
    InvalidLabels(String),
    #[error("metadata error in {path}: {detail}")]
    Metadata { path: PathBuf, detail: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("index {index} out of range 0..{len}")]
    OutOfRange { index: usize, len: usize },
    #[error("no embedding for prompt {0:?}")]
    MissingEmbedding(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, MomeError>;

impl MomeError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MomeError::Io {
            path: path.into(),
            source,
        }
    }
}
