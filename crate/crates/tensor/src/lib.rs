//! Dense `f32` tensors, a reverse-mode autodiff tape and AdamW.
//!
//! Sized for models of roughly 10^5..10^6 parameters on a single CPU thread.
//! A [`Tape`] is single-owner; read-only [`Tensor`]s may be shared freely.

mod attention;
pub mod error;
pub mod gradcheck;
mod kernels;
mod optim;
mod tape;
mod tensor;

pub use attention::{AttnMask, MASK_VALUE};
pub use error::{Result, TensorError};
pub use optim::{AdamW, ParamId, ParamStore, DEFAULT_LR};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
