//! Scene synthesis, latent codec, the controllable autoregressive video model, its
//! trainer, rollout engine and evaluation metrics.

pub mod codec;
pub mod error;
pub mod metrics;
pub mod model;
pub mod rollout;
pub mod scene;
pub mod tensorfile;
pub mod train;

pub use error::{FarError, Result};
