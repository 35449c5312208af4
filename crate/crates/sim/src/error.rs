use far_core::FarError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, SimError>;

#[derive(Debug, Error)]
pub enum SimError {
    /// Socket failure; `step` is 0 for the handshake, `k` for the k-th step and
    /// `n_steps + 1` for the closing exchange.
    #[error("transport error at step {step}: {source}")]
    Transport {
        step: usize,
        #[source]
        source: std::io::Error,
    },
    #[error("protocol error at step {step}: {msg}")]
    Protocol { step: usize, msg: String },
    #[error("server error at step {step}: {message}")]
    Server { step: usize, message: String },
    #[error("bad tensor payload: {0}")]
    Payload(String),
    #[error(transparent)]
    Core(#[from] FarError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
