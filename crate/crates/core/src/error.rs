use thiserror::Error;

use crate::tensor::TensorError;

/// Binary format decoding failures, shared by ESEQ and checkpoint files.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },
    #[error("unsupported version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("truncated: needed {needed} bytes at offset {offset}, file has {len}")]
    Truncated { offset: usize, needed: usize, len: usize },
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error("malformed payload: {0}")]
    Malformed(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("invalid data: {0}")]
    Data(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch} (mse {mse}, ss {ss})")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        mse: f64,
        ss: f64,
    },
}

pub type Result<T> = std::result::Result<T, Error>;
