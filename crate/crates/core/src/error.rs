use std::path::PathBuf;

use far_tensor::TensorError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, FarError>;

#[derive(Debug, Error)]
pub enum FarError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("{}: bad format: {msg}", file.display())]
    Format { file: PathBuf, msg: String },
    #[error("{}: unsupported version {found} (expected {expected})", file.display())]
    Version {
        file: PathBuf,
        found: u32,
        expected: u32,
    },
    #[error("{}: truncated: {msg}", file.display())]
    Truncated { file: PathBuf, msg: String },
    #[error("{}: tensor `{tensor}` has shape {found:?}, manifest implies {expected:?}", file.display())]
    ShapeDisagreement {
        file: PathBuf,
        tensor: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub(crate) fn contract<T>(msg: impl Into<String>) -> Result<T> {
    Err(FarError::Contract(msg.into()))
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> FarError {
    let path = path.into();
    move |source| FarError::Io { path, source }
}
