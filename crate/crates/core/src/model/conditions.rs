//! Building conditioning inputs for forward passes, either freshly encoded on a tape or
//! reassembled from per-frame values cached during a rollout.

use far_tensor::{Tape, Tensor};

use super::mmdit::{CanvasFrame, CondVars, Model};
use crate::error::{contract, Result};
use crate::scene::controls::ControlState;

/// Controls and canvases of one frame.
#[derive(Clone, Copy, Debug)]
pub struct FrameInputs<'a> {
    pub control: &'a ControlState,
    pub canvas: CanvasFrame<'a>,
}

/// One frame's encoded conditioning, detached from any tape.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedCondition {
    /// `[P, prompt_dim]`.
    pub prompt: Tensor,
    pub prompt_valid: Vec<bool>,
    /// `[V * S, d]` in `(v, s)` order.
    pub features: Tensor,
}

impl Model {
    /// Encodes `batch * t_len` frames given in `(b, t)` order on `tape`.
    pub fn encode_conditions(
        &self,
        tape: &mut Tape,
        frames: &[FrameInputs],
        batch: usize,
        t_len: usize,
    ) -> Result<(CondVars, Vec<bool>)> {
        if frames.len() != batch * t_len {
            return contract(format!(
                "{} frame inputs for {batch}x{t_len} frames",
                frames.len()
            ));
        }
        let controls: Vec<&ControlState> = frames.iter().map(|f| f.control).collect();
        let (prompt, valid) = self.encode_prompts(tape, &controls)?;
        let canvases: Vec<CanvasFrame> = frames.iter().map(|f| f.canvas).collect();
        let features = self.encode_canvases(tape, &canvases)?;
        let features = self.frames_to_tokens(tape, features, batch, t_len)?;
        Ok((CondVars { prompt, features }, valid))
    }

    /// Encodes a single frame outside any training graph.
    pub fn encode_condition(&self, frame: FrameInputs) -> Result<EncodedCondition> {
        let mut tape = Tape::inference();
        let (cond, valid) = self.encode_conditions(&mut tape, &[frame], 1, 1)?;
        Ok(EncodedCondition {
            prompt: tape.value(cond.prompt).clone(),
            prompt_valid: valid,
            features: tape.value(cond.features).clone(),
        })
    }

    /// Places cached per-frame conditions on `tape` for a batch-1 forward over `frames`.
    pub fn stack_conditions(
        &self,
        tape: &mut Tape,
        frames: &[&EncodedCondition],
    ) -> Result<(CondVars, Vec<bool>)> {
        let cfg = &self.config;
        let (v, s, d) = (cfg.views, cfg.tokens_per_view(), cfg.d_model);
        if frames.is_empty() {
            return contract("no frames to stack");
        }
        let t_len = frames.len();
        let mut prompt = Vec::new();
        let mut valid = Vec::new();
        for f in frames {
            prompt.extend_from_slice(f.prompt.data());
            valid.extend_from_slice(&f.prompt_valid);
        }
        let mut features = Vec::with_capacity(v * t_len * s * d);
        for view in 0..v {
            for f in frames {
                features.extend_from_slice(&f.features.data()[view * s * d..(view + 1) * s * d]);
            }
        }
        let prompt = tape.constant(Tensor::new(
            vec![t_len * cfg.prompt_len(), cfg.prompt_dim],
            prompt,
        )?);
        let features = tape.constant(Tensor::new(vec![v * t_len * s, d], features)?);
        Ok((CondVars { prompt, features }, valid))
    }
}
