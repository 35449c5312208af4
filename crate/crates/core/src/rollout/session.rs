//! A single-owner generation session and the closed-loop rollout driver.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use far_tensor::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{cfg_combine, CondCache, Counters, SamplerConfig};
use crate::codec::PatchCodec;
use crate::error::{contract, io_err, Result};
use crate::model::{
    CanvasFrame, EncodedCondition, ForwardInput, ForwardOptions, FrameFlags, FrameInputs, FrameKv,
    Model, PastKv,
};
use crate::scene::controls::{canvases, ControlState};

pub const LATENCY_HEADER: &str = "frame,seconds,model_evals,encoder_calls,attention_flops";

/// A finished frame that later frames may attend to.
#[derive(Clone, Debug)]
struct RefFrame {
    position: usize,
    /// `[V * S, C]`.
    latent: Tensor,
    cond: EncodedCondition,
    kv: Option<FrameKv>,
}

/// Generation state for one stream: the reference window, its cached keys and values,
/// the condition cache, the noise stream and counters.
pub struct Session<'m> {
    model: &'m Model,
    config: SamplerConfig,
    rng: ChaCha8Rng,
    history: VecDeque<RefFrame>,
    next_position: usize,
    prev_canvas: Option<Vec<f32>>,
    cond_cache: CondCache,
    counters: Counters,
}

fn encode_condition(
    model: &Model,
    cs: &ControlState,
    prev_canvas: Option<&[f32]>,
) -> Result<EncodedCondition> {
    let cfg = &model.config;
    let canvas = canvases(cs, cfg.image_height, cfg.image_width);
    model.encode_condition(FrameInputs {
        control: cs,
        canvas: CanvasFrame {
            current: &canvas,
            previous: prev_canvas,
        },
    })
}

/// Predicted velocity for the in-flight frame `[V * S, C]` and the attention FLOPs spent.
#[allow(clippy::too_many_arguments)]
fn velocity(
    model: &Model,
    z: &Tensor,
    t: f32,
    position: usize,
    cond: &EncodedCondition,
    refs: &[&RefFrame],
    past: Option<&PastKv>,
    drop_cond: bool,
) -> Result<(Vec<f32>, u64)> {
    let cfg = &model.config;
    let (v, s, c) = (cfg.views, cfg.tokens_per_view(), cfg.latent_channels());
    let target = FrameFlags {
        is_ref: false,
        drop_cond,
    };
    let mut tape = Tape::inference();
    if let Some(past) = past {
        let (cv, valid) = model.stack_conditions(&mut tape, &[cond])?;
        let latents = tape.constant(z.clone());
        let input = ForwardInput {
            batch: 1,
            positions: vec![position],
            t_diff: vec![t],
            flags: vec![target],
            prompt_valid: valid,
            latents,
        };
        let past = (!past.positions.is_empty()).then_some(past);
        let out = model.forward(&mut tape, &input, &cv, past, ForwardOptions::default())?;
        return Ok((tape.data(out.velocity).to_vec(), tape.attention_flops()));
    }
    let n = refs.len() + 1;
    let conds: Vec<&EncodedCondition> = refs.iter().map(|r| &r.cond).chain([cond]).collect();
    let (cv, valid) = model.stack_conditions(&mut tape, &conds)?;
    let mut lat = Vec::with_capacity(v * n * s * c);
    for view in 0..v {
        for frame in refs.iter().map(|r| &r.latent).chain([z]) {
            lat.extend_from_slice(&frame.data()[view * s * c..(view + 1) * s * c]);
        }
    }
    let latents = tape.constant(Tensor::new(vec![v * n * s, c], lat)?);
    let reference = FrameFlags {
        is_ref: true,
        drop_cond: false,
    };
    let mut flags = vec![reference; n - 1];
    flags.push(target);
    let mut t_diff = vec![0.0; n - 1];
    t_diff.push(t);
    let input = ForwardInput {
        batch: 1,
        positions: refs.iter().map(|r| r.position).chain([position]).collect(),
        t_diff,
        flags,
        prompt_valid: valid,
        latents,
    };
    let out = model.forward(&mut tape, &input, &cv, None, ForwardOptions::default())?;
    let all = tape.data(out.velocity);
    let mut u = Vec::with_capacity(v * s * c);
    for view in 0..v {
        let start = (view * n + n - 1) * s * c;
        u.extend_from_slice(&all[start..start + s * c]);
    }
    Ok((u, tape.attention_flops()))
}

/// Keys and values of a finished frame acting as a reference.
fn fill_kv(
    model: &Model,
    latent: &Tensor,
    position: usize,
    cond: &EncodedCondition,
) -> Result<(FrameKv, u64)> {
    let mut tape = Tape::inference();
    let (cv, valid) = model.stack_conditions(&mut tape, &[cond])?;
    let latents = tape.constant(latent.clone());
    let input = ForwardInput {
        batch: 1,
        positions: vec![position],
        t_diff: vec![0.0],
        flags: vec![FrameFlags {
            is_ref: true,
            drop_cond: false,
        }],
        prompt_valid: valid,
        latents,
    };
    let opts = ForwardOptions {
        control: true,
        capture_kv: true,
    };
    let out = model.forward(&mut tape, &input, &cv, None, opts)?;
    Ok((
        FrameKv::from_capture(position, out.kv)?,
        tape.attention_flops(),
    ))
}

impl<'m> Session<'m> {
    /// An empty session; the first sampled frame is then generated from controls alone.
    pub fn new(model: &'m Model, config: SamplerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Session {
            model,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            history: VecDeque::new(),
            next_position: 0,
            prev_canvas: None,
            cond_cache: CondCache::default(),
            counters: Counters::default(),
        })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.config
    }

    pub fn counters(&self) -> Counters {
        self.counters
    }

    /// Timeline index of the next frame.
    pub fn frame_index(&self) -> usize {
        self.next_position
    }

    /// Frames in the active reference window.
    pub fn history_len(&self) -> usize {
        self.history.len()
    }

    pub fn history_positions(&self) -> Vec<usize> {
        self.history.iter().map(|r| r.position).collect()
    }

    /// Number of window frames whose keys and values are cached.
    pub fn cached_frames(&self) -> usize {
        self.history.iter().filter(|r| r.kv.is_some()).count()
    }

    fn check_controls(&self, cs: &ControlState) -> Result<()> {
        cs.validate()?;
        let cfg = &self.model.config;
        if cs.views() != cfg.views {
            return contract(format!(
                "control state has {} views, model expects {}",
                cs.views(),
                cfg.views
            ));
        }
        if cs.boxes.len() != cfg.max_boxes || cs.caption.len() != cfg.caption_len {
            return contract("control state box or caption slots do not match the model");
        }
        Ok(())
    }

    fn check_latent(&self, latent: &Tensor) -> Result<()> {
        let cfg = &self.model.config;
        let expected = [cfg.views * cfg.tokens_per_view(), cfg.latent_channels()];
        if latent.shape() != expected {
            return contract(format!(
                "frame latent has shape {:?}, expected {expected:?}",
                latent.shape()
            ));
        }
        Ok(())
    }

    /// Supplies the canvases of the frame preceding the next one, for sessions that start
    /// mid-scene.
    pub fn prime_canvas(&mut self, canvas: &[f32]) {
        self.prev_canvas = Some(canvas.to_vec());
    }

    /// Appends a known frame (for example the ground-truth first frame) to the history.
    pub fn push_reference(&mut self, latent: Tensor, cs: &ControlState) -> Result<()> {
        self.check_controls(cs)?;
        self.check_latent(&latent)?;
        let cond = encode_condition(self.model, cs, self.prev_canvas.as_deref())?;
        self.counters.encoder_calls += 1;
        self.append(latent, cond, cs)
    }

    fn append(&mut self, latent: Tensor, cond: EncodedCondition, cs: &ControlState) -> Result<()> {
        let position = self.next_position;
        let kv = if self.config.kv_cache {
            let (kv, flops) = fill_kv(self.model, &latent, position, &cond)?;
            self.counters.kv_fills += 1;
            self.counters.attention_flops += flops;
            Some(kv)
        } else {
            None
        };
        self.history.push_back(RefFrame {
            position,
            latent,
            cond,
            kv,
        });
        while self.history.len() > self.config.ref_window {
            self.history.pop_front();
        }
        let cfg = &self.model.config;
        self.prev_canvas = Some(canvases(cs, cfg.image_height, cfg.image_width));
        self.next_position += 1;
        Ok(())
    }

    /// Generates the next frame under controls `cs`, appends it to the history and returns its latent.
    pub fn sample_frame(&mut self, cs: &ControlState) -> Result<Tensor> {
        let cfg = &self.model.config;
        let noise = Tensor::randn(
            vec![cfg.views * cfg.tokens_per_view(), cfg.latent_channels()],
            1.0,
            &mut self.rng,
        );
        self.sample_frame_from(cs, noise)
    }

    /// Like [`sample_frame`](Self::sample_frame) but starting from the given noise; the
    /// session's own noise stream is not advanced.
    pub fn sample_frame_from(&mut self, cs: &ControlState, noise: Tensor) -> Result<Tensor> {
        self.check_controls(cs)?;
        self.check_latent(&noise)?;
        let model = self.model;
        let position = self.next_position;
        let steps = self.config.steps;
        let window = self.history.len().min(self.config.ref_window);
        let refs: Vec<&RefFrame> = self
            .history
            .iter()
            .skip(self.history.len() - window)
            .collect();
        let past = if self.config.kv_cache {
            let kvs = refs
                .iter()
                .map(|r| r.kv.as_ref())
                .collect::<Option<Vec<&FrameKv>>>()
                .ok_or_else(|| {
                    crate::FarError::Contract("reference frame is missing cached keys".into())
                })?;
            Some(PastKv::assemble(&kvs, model.config.views)?)
        } else {
            None
        };

        let mut z = noise;
        let mut encoder_calls = 0;
        let mut evals = 0;
        let mut flops = 0;
        let mut uncached = None;
        let dt = 1.0 / steps as f32;
        for i in 0..steps {
            let t = 1.0 - i as f32 * dt;
            let cond = if self.config.cond_cache {
                let prev = self.prev_canvas.as_deref();
                self.cond_cache.get_or_encode(position, || {
                    encoder_calls += 1;
                    encode_condition(model, cs, prev)
                })?
            } else {
                encoder_calls += 1;
                &*uncached.insert(encode_condition(model, cs, self.prev_canvas.as_deref())?)
            };
            let (mut u, f) = velocity(model, &z, t, position, cond, &refs, past.as_ref(), false)?;
            evals += 1;
            flops += f;
            if self.config.uses_guidance() {
                let (u_unc, f) =
                    velocity(model, &z, t, position, cond, &refs, past.as_ref(), true)?;
                evals += 1;
                flops += f;
                cfg_combine(&mut u, &u_unc, self.config.cfg_scale);
            }
            z.data_mut()
                .iter_mut()
                .zip(&u)
                .for_each(|(z, u)| *z -= dt * u);
        }
        let cond = match uncached {
            Some(c) => c,
            None => self
                .cond_cache
                .get_or_encode(position, || unreachable!())?
                .clone(),
        };
        drop(refs);
        self.counters.encoder_calls += encoder_calls;
        self.counters.model_evals += evals;
        self.counters.attention_flops += flops;
        self.counters.frames += 1;
        if !z.all_finite() {
            return contract(format!("frame {position} has non-finite values"));
        }
        self.append(z.clone(), cond, cs)?;
        Ok(z)
    }
}

/// Per-frame timing and cost of a rollout.
#[derive(Clone, Debug, PartialEq)]
pub struct LatencyRecord {
    pub frame: usize,
    /// Wall-clock time for sampling and decoding the frame.
    pub seconds: f64,
    pub model_evals: u64,
    pub encoder_calls: u64,
    pub attention_flops: u64,
}

pub struct RolloutOutput {
    /// Generated frame latents `[V * S, C]`.
    pub latents: Vec<Tensor>,
    /// Decoded generated frames `[V, H, W, 3]`.
    pub images: Vec<Tensor>,
    pub records: Vec<LatencyRecord>,
    pub counters: Counters,
}

/// Generates `n_frames` frames in closed loop. `init` is an optional known first frame
/// with its controls; `controls[i]` drives the i-th generated frame.
pub fn rollout(
    model: &Model,
    codec: &PatchCodec,
    config: &SamplerConfig,
    init: Option<(&Tensor, &ControlState)>,
    controls: &[ControlState],
    n_frames: usize,
) -> Result<RolloutOutput> {
    if controls.len() < n_frames {
        return contract(format!(
            "{} control states for a {n_frames}-frame rollout",
            controls.len()
        ));
    }
    let cfg = &model.config;
    let mut session = Session::new(model, config.clone())?;
    if let Some((latent, cs)) = init {
        session.push_reference(latent.clone(), cs)?;
    }
    let mut out = RolloutOutput {
        latents: Vec::with_capacity(n_frames),
        images: Vec::with_capacity(n_frames),
        records: Vec::with_capacity(n_frames),
        counters: Counters::default(),
    };
    for cs in &controls[..n_frames] {
        let before = session.counters();
        let start = Instant::now();
        let z = session.sample_frame(cs)?;
        let img = codec.decode_tokens(&z, cfg.views, cfg.image_height, cfg.image_width)?;
        let seconds = start.elapsed().as_secs_f64();
        let after = session.counters();
        out.records.push(LatencyRecord {
            frame: session.frame_index() - 1,
            seconds,
            model_evals: after.model_evals - before.model_evals,
            encoder_calls: after.encoder_calls - before.encoder_calls,
            attention_flops: after.attention_flops - before.attention_flops,
        });
        out.latents.push(z);
        out.images.push(img);
    }
    out.counters = session.counters();
    Ok(out)
}

pub fn write_latency_csv(path: &Path, records: &[LatencyRecord]) -> Result<()> {
    let mut text = String::from(LATENCY_HEADER);
    text.push('\n');
    for r in records {
        writeln!(
            text,
            "{},{:.6},{},{},{}",
            r.frame, r.seconds, r.model_evals, r.encoder_calls, r.attention_flops
        )
        .unwrap();
    }
    std::fs::write(path, text).map_err(io_err(path))
}
