use thiserror::Error;

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: contract violation: {msg}")]
    Contract { op: &'static str, msg: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
}

pub(crate) fn contract<T>(op: &'static str, msg: impl Into<String>) -> Result<T> {
    Err(TensorError::Contract {
        op,
        msg: msg.into(),
    })
}

pub(crate) fn mismatch<T>(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<T> {
    Err(TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    })
}
