//! The controllable multi-view causal diffusion transformer.

pub mod checkpoint;
pub mod conditions;
pub mod config;
pub mod mask;
pub mod mmdit;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use conditions::{EncodedCondition, FrameInputs};
pub use config::ModelConfig;
pub use mask::{build_causal_mask, FrameFlags};
pub use mmdit::{
    CanvasFrame, CondVars, ForwardInput, ForwardOptions, ForwardOutput, FrameKv, Model, PastKv,
};
