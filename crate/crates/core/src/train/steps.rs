//! The two kinds of training step. Both leave the loss gradients in the model's
//! parameter store and return the loss value; applying the update is the caller's job.

use far_tensor::{Tape, Tensor};
use rand::Rng;

use super::data::TrainData;
use super::objective::{blend, fm_loss, sample_flow, BlendState, HorizonDist};
use crate::error::{contract, Result};
use crate::model::{CanvasFrame, ForwardInput, ForwardOptions, FrameFlags, FrameInputs, Model};
use crate::rollout::{SamplerConfig, Session};

/// One training sequence: consecutive frames of a scene whose first `refs` frames are clean
/// references and whose remaining frames are supervised.
#[derive(Clone, Debug)]
pub struct Clip {
    pub scene: usize,
    /// First scene frame of the clip.
    pub start: usize,
    /// Clean latent of every clip frame, `[V * S, C]`.
    pub latents: Vec<Tensor>,
    pub refs: usize,
    /// Hide the supervised frames' scene prompt and control features.
    pub drop_cond: bool,
}

/// Noises the supervised frames of equally long `clips`, runs the model and backpropagates
/// the flow-matching loss over supervised tokens. Returns the loss.
pub fn clip_loss(
    model: &mut Model,
    data: &TrainData,
    clips: &[Clip],
    rng: &mut impl Rng,
) -> Result<f32> {
    let Some(first) = clips.first() else {
        return contract("no clips to train on");
    };
    let t_len = first.latents.len();
    if clips
        .iter()
        .any(|c| c.latents.len() != t_len || c.refs >= t_len)
    {
        return contract("clips must share a length and keep at least one supervised frame");
    }
    let cfg = model.config.clone();
    let (v, s, c) = (cfg.views, cfg.tokens_per_view(), cfg.latent_channels());
    let bsz = clips.len();
    let per_frame = v * s * c;

    // Per (b, t): model input and regression target, each `[V * S, C]`.
    let mut inputs = Vec::with_capacity(bsz * t_len);
    let mut targets = Vec::with_capacity(bsz * t_len);
    let mut t_diff = Vec::with_capacity(bsz * t_len);
    let mut flags = Vec::with_capacity(bsz * t_len);
    for clip in clips {
        for (t, x) in clip.latents.iter().enumerate() {
            if x.numel() != per_frame {
                return contract(format!(
                    "clip latent has {} values, expected {per_frame}",
                    x.numel()
                ));
            }
            if t < clip.refs {
                inputs.push(x.data().to_vec());
                targets.push(vec![0.0; per_frame]);
                t_diff.push(0.0);
                flags.push(FrameFlags {
                    is_ref: true,
                    drop_cond: false,
                });
            } else {
                let f = sample_flow(x.data(), rng);
                inputs.push(f.z_t);
                targets.push(f.u_star);
                t_diff.push(f.t);
                flags.push(FrameFlags {
                    is_ref: false,
                    drop_cond: clip.drop_cond,
                });
            }
        }
    }
    let n = bsz * v * t_len * s;
    let mut lat = Vec::with_capacity(n * c);
    let mut tgt = Vec::with_capacity(n * c);
    let mut rows = Vec::with_capacity(n);
    for b in 0..bsz {
        for view in 0..v {
            for t in 0..t_len {
                let i = b * t_len + t;
                lat.extend_from_slice(&inputs[i][view * s * c..(view + 1) * s * c]);
                tgt.extend_from_slice(&targets[i][view * s * c..(view + 1) * s * c]);
                rows.extend(std::iter::repeat_n(!flags[i].is_ref, s));
            }
        }
    }

    let mut frames = Vec::with_capacity(bsz * t_len);
    for clip in clips {
        let rec = &data.records[clip.scene];
        for t in 0..t_len {
            let f = clip.start + t;
            frames.push(FrameInputs {
                control: &rec.controls[f],
                canvas: CanvasFrame {
                    current: rec.canvas(f),
                    previous: (f > 0).then(|| rec.canvas(f - 1)),
                },
            });
        }
    }

    let mut tape = Tape::new();
    let (cond, valid) = model.encode_conditions(&mut tape, &frames, bsz, t_len)?;
    let latents = tape.constant(Tensor::new(vec![n, c], lat)?);
    let input = ForwardInput {
        batch: bsz,
        positions: (0..t_len).collect(),
        t_diff,
        flags,
        prompt_valid: valid,
        latents,
    };
    let out = model.forward(&mut tape, &input, &cond, None, ForwardOptions::default())?;
    let loss = fm_loss(
        &mut tape,
        out.velocity,
        &Tensor::new(vec![n, c], tgt)?,
        &rows,
    )?;
    let value = tape.value(loss).item();
    tape.backward(loss)?;
    model.params.zero_grad();
    model.params.accumulate_grads(&tape);
    Ok(value)
}

/// Settings shared by the step functions.
#[derive(Clone, Debug)]
pub struct StepConfig {
    pub batch: usize,
    pub clip_len: usize,
    pub p_uncond: f32,
    pub rollout_steps: usize,
    pub bf_max_len: usize,
    pub bf_window: usize,
}

fn pick_scene(data: &TrainData, min_frames: usize, rng: &mut impl Rng) -> Result<usize> {
    let eligible: Vec<usize> = (0..data.len())
        .filter(|&i| data.records[i].frames_len() >= min_frames)
        .collect();
    if eligible.is_empty() {
        return contract(format!(
            "no scene has the {min_frames} frames a training clip needs"
        ));
    }
    Ok(eligible[rng.random_range(0..eligible.len())])
}

/// Reference-horizon step: each clip of `clip_len` frames conditions on its first `l`
/// frames, with `l` drawn from `horizon`, and is supervised on the rest.
pub fn arhc_step(
    model: &mut Model,
    data: &TrainData,
    cfg: &StepConfig,
    horizon: &HorizonDist,
    rng: &mut impl Rng,
) -> Result<f32> {
    let mut clips = Vec::with_capacity(cfg.batch);
    for _ in 0..cfg.batch {
        let scene = pick_scene(data, cfg.clip_len, rng)?;
        let start = rng.random_range(0..=data.records[scene].frames_len() - cfg.clip_len);
        let refs = horizon.sample(rng);
        let drop_cond = rng.random::<f32>() < cfg.p_uncond;
        clips.push(Clip {
            scene,
            start,
            latents: data.latents[scene][start..start + cfg.clip_len].to_vec(),
            refs,
            drop_cond,
        });
    }
    clip_loss(model, data, &clips, rng)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BfOutcome {
    pub loss: f32,
    /// Blend weight used for this step.
    pub alpha: f32,
    /// Length of the self-generated history.
    pub rollout_len: usize,
}

/// Blend-forcing step: rolls the current model out from a ground-truth frame for `R - 1`
/// frames, blends each generated latent with its ground truth, then supervises frame `R`
/// conditioned on the last `bf_window` history frames. The schedule advances once.
pub fn bf_step(
    model: &mut Model,
    data: &TrainData,
    cfg: &StepConfig,
    state: &mut BlendState,
    rng: &mut impl Rng,
) -> Result<BfOutcome> {
    let r_hi = cfg.bf_max_len.min(data.max_frames().saturating_sub(1));
    if r_hi < 2 {
        return contract(format!(
            "blend forcing needs scenes of at least 3 frames; the longest has {}",
            data.max_frames()
        ));
    }
    let r = rng.random_range(2..=r_hi);
    let alpha = state.alpha();
    let mut clips = Vec::with_capacity(cfg.batch);
    for _ in 0..cfg.batch {
        let scene = pick_scene(data, r + 1, rng)?;
        let rec = &data.records[scene];
        let start = rng.random_range(0..=rec.frames_len() - r - 1);
        let gt = &data.latents[scene][start..=start + r];
        let mut history = vec![gt[0].clone()];
        if alpha > 0.0 {
            let sampler = SamplerConfig {
                steps: cfg.rollout_steps,
                ref_window: cfg.bf_window,
                seed: rng.next_u64(),
                ..Default::default()
            };
            let mut session = Session::new(model, sampler)?;
            if start > 0 {
                session.prime_canvas(rec.canvas(start - 1));
            }
            session.push_reference(gt[0].clone(), &rec.controls[start])?;
            for (i, truth) in gt.iter().enumerate().take(r).skip(1) {
                let generated = session.sample_frame(&rec.controls[start + i])?;
                history.push(blend(&generated, truth, alpha)?);
            }
        } else {
            history.extend_from_slice(&gt[1..r]);
        }
        let w = cfg.bf_window.min(r);
        let mut latents = history[r - w..].to_vec();
        latents.push(gt[r].clone());
        clips.push(Clip {
            scene,
            start: start + r - w,
            latents,
            refs: w,
            drop_cond: rng.random::<f32>() < cfg.p_uncond,
        });
    }
    let loss = clip_loss(model, data, &clips, rng)?;
    *state = state.alpha_update();
    Ok(BfOutcome {
        loss,
        alpha,
        rollout_len: r,
    })
}
