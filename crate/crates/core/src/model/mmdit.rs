//! Multi-view causal diffusion transformer with a parallel control branch.
//!
//! Hidden states are kept as `[N, d]` matrices whose rows are ordered `(batch, view,
//! frame, spatial)`, so each `(batch, view)` pair is one contiguous temporal sequence.
//! Conditioning enters in three ways: a per-frame scene prompt joined to the keys and
//! values of every temporal attention layer, dense canvas features fed through the
//! control branch, and the diffusion time driving per-frame adaptive norms.

use far_tensor::{AttnMask, ParamId, ParamStore, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use super::mask::{FrameFlags, LayoutSpec, TemporalLayout};
use crate::error::{contract, Result};
use crate::scene::controls::ControlState;
use crate::scene::world::N_CATEGORIES;

const NORM_EPS: f32 = 1e-6;
const CAMERA_FEATURES: usize = 21;
const BOX_FEATURES: usize = 24;
const EGO_FEATURES: usize = 16;

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let y = tape.matmul(x, w)?;
        Ok(tape.add_bias(y, b)?)
    }
}

struct Builder {
    store: ParamStore,
    rng: ChaCha8Rng,
}

impl Builder {
    fn linear(&mut self, name: &str, din: usize, dout: usize, zero: bool) -> Linear {
        let w = if zero {
            Tensor::zeros(vec![din, dout])
        } else {
            Tensor::randn(vec![din, dout], 1.0 / (din as f32).sqrt(), &mut self.rng)
        };
        Linear {
            w: self.store.add(format!("{name}.w"), w),
            b: self
                .store
                .add(format!("{name}.b"), Tensor::zeros(vec![dout])),
        }
    }

    fn table(&mut self, name: &str, rows: usize, cols: usize, std: f32) -> ParamId {
        let t = if std == 0.0 {
            Tensor::zeros(vec![rows, cols])
        } else {
            Tensor::randn(vec![rows, cols], std, &mut self.rng)
        };
        self.store.add(name, t)
    }

    fn temporal(&mut self, name: &str, cfg: &ModelConfig) -> TemporalBlock {
        let d = cfg.d_model;
        TemporalBlock {
            modulation: self.linear(&format!("{name}.mod"), d, 4 * d, true),
            qkv: self.linear(&format!("{name}.qkv"), d, 3 * d, false),
            prompt_kv: self.linear(&format!("{name}.prompt_kv"), cfg.prompt_dim, 2 * d, false),
            out: self.linear(&format!("{name}.out"), d, d, false),
            mlp_in: self.linear(&format!("{name}.mlp_in"), d, cfg.mlp_ratio * d, false),
            mlp_out: self.linear(&format!("{name}.mlp_out"), cfg.mlp_ratio * d, d, false),
            rel_bias: self.table(&format!("{name}.rel_bias"), cfg.n_heads, cfg.max_t + 1, 0.0),
        }
    }
}

#[derive(Clone, Debug)]
struct TemporalBlock {
    modulation: Linear,
    qkv: Linear,
    prompt_kv: Linear,
    out: Linear,
    mlp_in: Linear,
    mlp_out: Linear,
    rel_bias: ParamId,
}

#[derive(Clone, Debug)]
struct CrossViewBlock {
    qkv: Linear,
    out: Linear,
}

#[derive(Clone, Debug)]
struct Ids {
    latent_in: Linear,
    view_emb: ParamId,
    spatial_emb: ParamId,
    time_in: Linear,
    time_out: Linear,
    caption_emb: ParamId,
    camera: Linear,
    boxes: Linear,
    box_category: ParamId,
    ego: Linear,
    prompt_slot: ParamId,
    canvas_in: Linear,
    canvas_out: Linear,
    control_in: Linear,
    backbone: Vec<TemporalBlock>,
    control: Vec<TemporalBlock>,
    control_proj: Vec<Linear>,
    crossview: Vec<CrossViewBlock>,
    final_mod: Linear,
    final_out: Linear,
}

/// Model weights plus the handles used to address them.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    ids: Ids,
}

/// Embedded conditioning for the frames of a forward pass.
#[derive(Clone, Copy, Debug)]
pub struct CondVars {
    /// `[B * T * P, prompt_dim]` in `(b, t, slot)` order.
    pub prompt: Var,
    /// `[B * V * T * S, d]` in `(b, v, t, s)` order.
    pub features: Var,
}

/// Everything except conditioning that a forward pass needs.
#[derive(Clone, Debug)]
pub struct ForwardInput {
    pub batch: usize,
    /// Timeline positions of the `T` frames, shared by the batch.
    pub positions: Vec<usize>,
    /// `[B * T]` diffusion times; reference frames use 0.
    pub t_diff: Vec<f32>,
    /// `[B * T]` frame flags in `(b, t)` order.
    pub flags: Vec<FrameFlags>,
    /// `[B * T * P]` prompt token validity.
    pub prompt_valid: Vec<bool>,
    /// `[B * V * T * S, C]` latents in `(b, v, t, s)` order.
    pub latents: Var,
}

/// Keys and values of earlier reference frames for each temporal layer (batch size 1).
#[derive(Clone, Debug, Default)]
pub struct PastKv {
    pub positions: Vec<usize>,
    /// Per temporal layer (backbone then control): keys and values, each `[V, n * S, d]`.
    pub layers: Vec<(Tensor, Tensor)>,
}

/// One reference frame's keys and values per temporal layer, each `[V * S, d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameKv {
    pub position: usize,
    pub layers: Vec<(Tensor, Tensor)>,
}

impl PastKv {
    /// Concatenates cached frames in order into per-view key/value sequences.
    pub fn assemble(frames: &[&FrameKv], views: usize) -> Result<Self> {
        let Some(first) = frames.first() else {
            return Ok(PastKv::default());
        };
        let n_layers = first.layers.len();
        let rows = first.layers[0].0.shape()[0];
        let d = first.layers[0].0.shape()[1];
        if rows % views != 0 {
            return contract("cached keys do not split evenly across views");
        }
        let s = rows / views;
        let n = frames.len();
        let mut layers = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let mut k = Vec::with_capacity(views * n * s * d);
            let mut v = Vec::with_capacity(views * n * s * d);
            for view in 0..views {
                for f in frames {
                    if f.layers.len() != n_layers {
                        return contract("cached frames disagree on layer count");
                    }
                    let range = view * s * d..(view + 1) * s * d;
                    k.extend_from_slice(&f.layers[l].0.data()[range.clone()]);
                    v.extend_from_slice(&f.layers[l].1.data()[range]);
                }
            }
            layers.push((
                Tensor::new(vec![views, n * s, d], k)?,
                Tensor::new(vec![views, n * s, d], v)?,
            ));
        }
        Ok(PastKv {
            positions: frames.iter().map(|f| f.position).collect(),
            layers,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions {
    /// Run the control branch; `false` gives the backbone alone.
    pub control: bool,
    /// Return every temporal layer's frame keys and values.
    pub capture_kv: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        ForwardOptions {
            control: true,
            capture_kv: false,
        }
    }
}

pub struct ForwardOutput {
    /// `[B * V * T * S, C]` predicted velocity.
    pub velocity: Var,
    /// Per temporal layer (backbone then control): keys and values `[B * V, T * S, d]`.
    pub kv: Vec<(Tensor, Tensor)>,
}

/// Current frame's canvases plus the previous frame's, for the causal canvas encoder.
#[derive(Clone, Copy, Debug)]
pub struct CanvasFrame<'a> {
    /// `[V, H, W, C_canvas]`.
    pub current: &'a [f32],
    pub previous: Option<&'a [f32]>,
}

/// Shared state of one forward pass.
struct Pass<'a> {
    layout: &'a TemporalLayout,
    /// Per-frame `silu(time embedding)`, `[B * T, d]`.
    temb: Var,
    /// Frame row (`b * T + t`) of each token.
    frame_of: &'a [usize],
    /// Scene prompt `[B * T * P, prompt_dim]`.
    prompt: Var,
    /// Row of the prompt table each `(group, frame, slot)` key reads.
    prompt_rows: &'a [usize],
    groups: usize,
    t_len: usize,
}

pub(crate) fn sinusoid(t: f32, dim: usize) -> Vec<f32> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f32.ln()) * i as f32 / half as f32).exp();
        let arg = 1000.0 * t * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    out
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let cfg = &config;
        let (d, pd, c) = (cfg.d_model, cfg.prompt_dim, cfg.latent_channels());
        let mut b = Builder {
            store: ParamStore::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let canvas_in = 2 * cfg.patch * cfg.patch * cfg.canvas_channels;
        let ids = Ids {
            latent_in: b.linear("embed.latent", c, d, false),
            view_emb: b.table("embed.view", cfg.views, d, 0.02),
            spatial_emb: b.table("embed.spatial", cfg.tokens_per_view(), d, 0.02),
            time_in: b.linear("time.in", d, d, false),
            time_out: b.linear("time.out", d, d, false),
            caption_emb: b.table("prompt.caption", cfg.vocab_size, pd, 1.0),
            camera: b.linear("prompt.camera", CAMERA_FEATURES, pd, false),
            boxes: b.linear("prompt.boxes", BOX_FEATURES, pd, false),
            box_category: b.table("prompt.box_category", N_CATEGORIES, pd, 1.0),
            ego: b.linear("prompt.ego", EGO_FEATURES, pd, false),
            prompt_slot: b.table("prompt.slot", cfg.prompt_len(), pd, 0.02),
            canvas_in: b.linear("canvas.in", canvas_in, d, false),
            canvas_out: b.linear("canvas.out", d, d, false),
            control_in: b.linear("control.in", d, d, true),
            backbone: (0..cfg.backbone_depth)
                .map(|l| b.temporal(&format!("backbone.{l}"), cfg))
                .collect(),
            control: (0..cfg.control_depth)
                .map(|l| b.temporal(&format!("control.{l}"), cfg))
                .collect(),
            control_proj: (0..cfg.control_depth)
                .map(|l| b.linear(&format!("control.proj.{l}"), d, d, true))
                .collect(),
            crossview: (0..cfg.crossview_blocks())
                .map(|i| CrossViewBlock {
                    qkv: b.linear(&format!("crossview.{i}.qkv"), d, 3 * d, false),
                    out: b.linear(&format!("crossview.{i}.out"), d, d, true),
                })
                .collect(),
            final_mod: b.linear("final.mod", d, 2 * d, true),
            final_out: b.linear("final.out", d, c, false),
        };
        Ok(Model {
            config,
            params: b.store,
            ids,
        })
    }

    /// Rebuilds a model around stored weights, checking every name and shape.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let template = Model::new(config, 0)?;
        if template.params.len() != params.len() {
            return contract(format!(
                "expected {} parameter tensors, found {}",
                template.params.len(),
                params.len()
            ));
        }
        for ((name, want), (got_name, got)) in template.params.iter().zip(params.iter()) {
            if name != got_name || want.shape() != got.shape() {
                return contract(format!(
                    "parameter {got_name} {:?} does not match expected {name} {:?}",
                    got.shape(),
                    want.shape()
                ));
            }
        }
        Ok(Model { params, ..template })
    }

    /// Adds Gaussian noise to every weight, including zero-initialized ones. Used to probe
    /// structural properties on a model that is not at its special initial point.
    pub fn perturb(&mut self, std: f32, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<_> = self.params.ids().collect();
        for id in ids {
            let t = self.params.get_mut(id);
            let noise = Tensor::randn(t.shape().to_vec(), std, &mut rng);
            t.data_mut()
                .iter_mut()
                .zip(noise.data())
                .for_each(|(x, n)| *x += n);
        }
    }

    /// Scalar count of the control branch (blocks, input and injection projections).
    pub fn control_param_count(&self) -> usize {
        self.params.count_with_prefix("control.")
    }

    pub fn backbone_param_count(&self) -> usize {
        self.params.count_with_prefix("backbone.") + self.params.count_with_prefix("crossview.")
    }

    /// Unified scene prompts `[F * P, prompt_dim]` and their validity for `F` control states.
    pub fn encode_prompts(
        &self,
        tape: &mut Tape,
        controls: &[&ControlState],
    ) -> Result<(Var, Vec<bool>)> {
        let cfg = &self.config;
        let st = &self.params;
        let f = controls.len();
        if f == 0 {
            return contract("encode_prompts needs at least one control state");
        }
        let (v, n, lc, pd) = (cfg.views, cfg.max_boxes, cfg.caption_len, cfg.prompt_dim);
        let mut caption = Vec::with_capacity(f * lc);
        let mut cams = Vec::with_capacity(f * v * CAMERA_FEATURES);
        let mut boxes = Vec::with_capacity(f * n * BOX_FEATURES);
        let mut cats = Vec::with_capacity(f * n);
        let mut ego = Vec::with_capacity(f * EGO_FEATURES);
        let mut valid = Vec::with_capacity(f * cfg.prompt_len());
        let scale_k = 1.0 / cfg.image_width as f32;
        for cs in controls {
            if cs.boxes.len() > n || cs.box_mask.len() != cs.boxes.len() {
                return contract(format!(
                    "control state has {} boxes, capacity is {n}",
                    cs.boxes.len()
                ));
            }
            if cs.cameras.len() != v || cs.caption.len() != lc {
                return contract(format!(
                    "control state has {} cameras and {} caption tokens, model expects {v} and {lc}",
                    cs.cameras.len(),
                    cs.caption.len()
                ));
            }
            if let Some(&tok) = cs.caption.iter().find(|&&c| c as usize >= cfg.vocab_size) {
                return contract(format!("caption token {tok} outside vocabulary"));
            }
            caption.extend(cs.caption.iter().map(|&c| c as usize));
            for p in &cs.cameras {
                for row in p {
                    cams.extend(row[..3].iter().map(|x| x * scale_k));
                    cams.extend(&row[3..6]);
                    cams.push(row[6] * 0.5);
                }
            }
            for slot in 0..n {
                match cs.boxes.get(slot).filter(|_| cs.box_mask[slot]) {
                    Some(b) => {
                        boxes.extend(
                            b.corners()
                                .iter()
                                .flat_map(|c| [c.x / 20.0, c.y / 20.0, c.z / 20.0]),
                        );
                        cats.push(b.category as usize % N_CATEGORIES);
                    }
                    None => {
                        boxes.extend([0.0; BOX_FEATURES]);
                        cats.push(0);
                    }
                }
            }
            for (i, row) in cs.ego.iter().enumerate() {
                for (j, &x) in row.iter().enumerate() {
                    ego.push(if j == 3 && i < 3 { x / 50.0 } else { x });
                }
            }
            valid.extend(std::iter::repeat_n(true, lc + v));
            valid.extend((0..n).map(|s| cs.box_mask.get(s).copied().unwrap_or(false)));
            valid.push(true);
        }
        let ids = &self.ids;
        let cap_table = tape.param(st, ids.caption_emb);
        let cap = tape.gather_rows(cap_table, &caption)?;
        let cap = tape.reshape(cap, &[f, lc, pd])?;
        let cams = tape.constant(Tensor::new(vec![f * v, CAMERA_FEATURES], cams)?);
        let cams = ids.camera.apply(tape, st, cams)?;
        let cams = tape.reshape(cams, &[f, v, pd])?;
        let bx = tape.constant(Tensor::new(vec![f * n, BOX_FEATURES], boxes)?);
        let bx = ids.boxes.apply(tape, st, bx)?;
        let cat_table = tape.param(st, ids.box_category);
        let cat = tape.gather_rows(cat_table, &cats)?;
        let bx = tape.add(bx, cat)?;
        let bx = tape.reshape(bx, &[f, n, pd])?;
        let eg = tape.constant(Tensor::new(vec![f, EGO_FEATURES], ego)?);
        let eg = ids.ego.apply(tape, st, eg)?;
        let eg = tape.reshape(eg, &[f, 1, pd])?;
        let tokens = tape.concat(&[cap, cams, bx, eg], 1)?;
        let p = cfg.prompt_len();
        let tokens = tape.reshape(tokens, &[f * p, pd])?;
        let slot_table = tape.param(st, ids.prompt_slot);
        let slot_rows: Vec<usize> = (0..f).flat_map(|_| 0..p).collect();
        let slots = tape.gather_rows(slot_table, &slot_rows)?;
        Ok((tape.add(tokens, slots)?, valid))
    }

    /// Canvas features `[F * V * S, d]` in `(frame, view, s)` order.
    ///
    /// A patch-strided convolution over the current and previous canvases (zeros when
    /// there is no previous frame), followed by SiLU and a per-token linear map.
    pub fn encode_canvases(&self, tape: &mut Tape, frames: &[CanvasFrame]) -> Result<Var> {
        let cfg = &self.config;
        let (v, h, w, cc, p) = (
            cfg.views,
            cfg.image_height,
            cfg.image_width,
            cfg.canvas_channels,
            cfg.patch,
        );
        let (gh, gw) = (cfg.latent_h(), cfg.latent_w());
        let per_frame = v * h * w * cc;
        let width = 2 * p * p * cc;
        let mut rows = Vec::with_capacity(frames.len() * v * gh * gw * width);
        for fr in frames {
            if fr.current.len() != per_frame || fr.previous.is_some_and(|pr| pr.len() != per_frame)
            {
                return contract(format!(
                    "canvas frame must hold {v}x{h}x{w}x{cc} values, got {}",
                    fr.current.len()
                ));
            }
            for view in 0..v {
                for gi in 0..gh {
                    for gj in 0..gw {
                        for src in [Some(fr.current), fr.previous] {
                            for dy in 0..p {
                                let start = ((view * h + gi * p + dy) * w + gj * p) * cc;
                                match src {
                                    Some(s) => rows.extend_from_slice(&s[start..start + p * cc]),
                                    None => rows.extend(std::iter::repeat_n(0.0, p * cc)),
                                }
                            }
                        }
                    }
                }
            }
        }
        let n = frames.len() * v * gh * gw;
        let x = tape.constant(Tensor::new(vec![n, width], rows)?);
        let x = self.ids.canvas_in.apply(tape, &self.params, x)?;
        let x = tape.silu(x)?;
        self.ids.canvas_out.apply(tape, &self.params, x)
    }

    /// Reorders `(b, t, v, s)`-ordered rows into the model's `(b, v, t, s)` order.
    pub fn frames_to_tokens(
        &self,
        tape: &mut Tape,
        x: Var,
        batch: usize,
        t_len: usize,
    ) -> Result<Var> {
        let cols = tape.shape(x)[1];
        let (v, s) = (self.config.views, self.config.tokens_per_view());
        let y = tape.reshape(x, &[batch, t_len, v, s * cols])?;
        let y = tape.permute(y, &[0, 2, 1, 3])?;
        Ok(tape.reshape(y, &[batch * v * t_len * s, cols])?)
    }

    /// Predicts the flow velocity for every token.
    pub fn forward(
        &self,
        tape: &mut Tape,
        input: &ForwardInput,
        cond: &CondVars,
        past: Option<&PastKv>,
        opts: ForwardOptions,
    ) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let st = &self.params;
        let ids = &self.ids;
        let (bsz, t_len) = (input.batch, input.positions.len());
        let (v, s, d, c, p) = (
            cfg.views,
            cfg.tokens_per_view(),
            cfg.d_model,
            cfg.latent_channels(),
            cfg.prompt_len(),
        );
        let n = bsz * v * t_len * s;
        let frames = bsz * t_len;
        if bsz == 0 || t_len == 0 {
            return contract("forward needs at least one sample and one frame");
        }
        if tape.shape(input.latents) != [n, c] {
            return contract(format!(
                "latents have shape {:?}, expected [{n}, {c}]",
                tape.shape(input.latents)
            ));
        }
        if input.t_diff.len() != frames || input.flags.len() != frames {
            return contract("t_diff and flags need one entry per (sample, frame)");
        }
        if tape.shape(cond.prompt) != [frames * p, cfg.prompt_dim]
            || tape.shape(cond.features) != [n, d]
        {
            return contract(format!(
                "conditioning shapes {:?} / {:?} do not match {frames} frames of {n} tokens",
                tape.shape(cond.prompt),
                tape.shape(cond.features)
            ));
        }
        let past_positions = past.map(|pk| pk.positions.clone()).unwrap_or_default();
        if let Some(pk) = past {
            if pk.layers.len() != cfg.temporal_layers() && !pk.positions.is_empty() {
                return contract(format!(
                    "cached keys cover {} layers, model has {}",
                    pk.layers.len(),
                    cfg.temporal_layers()
                ));
            }
        }
        let layout = TemporalLayout::new(&LayoutSpec {
            batch: bsz,
            views: v,
            tokens: s,
            prompt_len: p,
            heads: cfg.n_heads,
            max_t: cfg.max_t,
            positions: &input.positions,
            past_positions: &past_positions,
            flags: &input.flags,
            prompt_valid: &input.prompt_valid,
        })?;

        let mut frame_of = Vec::with_capacity(n);
        let mut view_of = Vec::with_capacity(n);
        let mut spatial_of = Vec::with_capacity(n);
        for b in 0..bsz {
            for view in 0..v {
                for t in 0..t_len {
                    for sp in 0..s {
                        frame_of.push(b * t_len + t);
                        view_of.push(view);
                        spatial_of.push(sp);
                    }
                }
            }
        }
        let prompt_rows: Vec<usize> = (0..bsz)
            .flat_map(|b| (0..v).flat_map(move |_| (0..t_len * p).map(move |j| b * t_len * p + j)))
            .collect();

        // Diffusion-time embedding per frame.
        let sin: Vec<f32> = input.t_diff.iter().flat_map(|&t| sinusoid(t, d)).collect();
        let temb = tape.constant(Tensor::new(vec![frames, d], sin)?);
        let temb = ids.time_in.apply(tape, st, temb)?;
        let temb = tape.silu(temb)?;
        let temb = ids.time_out.apply(tape, st, temb)?;
        let temb_act = tape.silu(temb)?;

        let x = ids.latent_in.apply(tape, st, input.latents)?;
        let view_table = tape.param(st, ids.view_emb);
        let view_e = tape.gather_rows(view_table, &view_of)?;
        let spatial_table = tape.param(st, ids.spatial_emb);
        let spatial_e = tape.gather_rows(spatial_table, &spatial_of)?;
        let time_e = tape.gather_rows(temb, &frame_of)?;
        let x = tape.add(x, view_e)?;
        let x = tape.add(x, spatial_e)?;
        let mut x = tape.add(x, time_e)?;

        let pass = Pass {
            layout: &layout,
            temb: temb_act,
            frame_of: &frame_of,
            prompt: cond.prompt,
            prompt_rows: &prompt_rows,
            groups: bsz * v,
            t_len,
        };

        let mut control_state = None;
        if opts.control {
            let mut u = cond.features;
            if input.flags.iter().any(|f| f.drop_cond) {
                let keep: Vec<f32> = frame_of
                    .iter()
                    .flat_map(|&f| {
                        std::iter::repeat_n(if input.flags[f].drop_cond { 0.0 } else { 1.0 }, d)
                    })
                    .collect();
                let keep = tape.constant(Tensor::new(vec![n, d], keep)?);
                u = tape.mul(u, keep)?;
            }
            let proj = ids.control_in.apply(tape, st, u)?;
            control_state = Some(tape.add(x, proj)?);
        }

        let layer_past = |l: usize| {
            past.filter(|pk| !pk.positions.is_empty())
                .map(|pk| &pk.layers[l])
        };
        let mut kv_backbone = Vec::new();
        let mut kv_control = Vec::new();
        for l in 0..cfg.backbone_depth {
            let (xb, kv) = self.temporal_block(
                tape,
                &ids.backbone[l],
                x,
                &pass,
                layer_past(l),
                opts.capture_kv,
            )?;
            x = xb;
            kv_backbone.extend(kv);
            if let Some(c_prev) = control_state.filter(|_| l < cfg.control_depth) {
                let layer = cfg.backbone_depth + l;
                let (c_next, kv) = self.temporal_block(
                    tape,
                    &ids.control[l],
                    c_prev,
                    &pass,
                    layer_past(layer),
                    opts.capture_kv,
                )?;
                let inject = ids.control_proj[l].apply(tape, st, c_next)?;
                x = tape.add(x, inject)?;
                control_state = Some(c_next);
                kv_control.extend(kv);
            }
            if (l + 1) % cfg.crossview_period == 0 {
                let idx = (l + 1) / cfg.crossview_period - 1;
                x = self.cross_view_block(tape, &ids.crossview[idx], x, bsz, t_len)?;
            }
        }

        let m = ids.final_mod.apply(tape, st, temb_act)?;
        let m = tape.gather_rows(m, &frame_of)?;
        let shift = tape.slice(m, 1, 0, d)?;
        let scale = tape.slice(m, 1, d, d)?;
        let h = modulated_norm(tape, x, shift, scale)?;
        let velocity = ids.final_out.apply(tape, st, h)?;
        kv_backbone.extend(kv_control);
        Ok(ForwardOutput {
            velocity,
            kv: kv_backbone,
        })
    }

    fn temporal_block(
        &self,
        tape: &mut Tape,
        blk: &TemporalBlock,
        x: Var,
        pass: &Pass,
        past: Option<&(Tensor, Tensor)>,
        capture: bool,
    ) -> Result<(Var, Option<(Tensor, Tensor)>)> {
        let cfg = &self.config;
        let st = &self.params;
        let d = cfg.d_model;
        let (g, lq) = (pass.groups, pass.layout.lq);
        let m = blk.modulation.apply(tape, st, pass.temb)?;
        let m = tape.gather_rows(m, pass.frame_of)?;
        let shift1 = tape.slice(m, 1, 0, d)?;
        let scale1 = tape.slice(m, 1, d, d)?;
        let shift2 = tape.slice(m, 1, 2 * d, d)?;
        let scale2 = tape.slice(m, 1, 3 * d, d)?;

        let h = modulated_norm(tape, x, shift1, scale1)?;
        let qkv = blk.qkv.apply(tape, st, h)?;
        let q = tape.slice(qkv, 1, 0, d)?;
        let k = tape.slice(qkv, 1, d, d)?;
        let v = tape.slice(qkv, 1, 2 * d, d)?;
        let q = tape.reshape(q, &[g, lq, d])?;
        let k = tape.reshape(k, &[g, lq, d])?;
        let v = tape.reshape(v, &[g, lq, d])?;
        let captured = capture.then(|| (tape.value(k).clone(), tape.value(v).clone()));

        let pkv = blk.prompt_kv.apply(tape, st, pass.prompt)?;
        let pkv = tape.gather_rows(pkv, pass.prompt_rows)?;
        let pk = tape.slice(pkv, 1, 0, d)?;
        let pv = tape.slice(pkv, 1, d, d)?;
        let lp = pass.t_len * cfg.prompt_len();
        let pk = tape.reshape(pk, &[g, lp, d])?;
        let pv = tape.reshape(pv, &[g, lp, d])?;
        let (keys, values) = match past {
            Some((pk_past, pv_past)) => {
                let kp = tape.constant(pk_past.clone());
                let vp = tape.constant(pv_past.clone());
                (tape.concat(&[pk, kp, k], 1)?, tape.concat(&[pv, vp, v], 1)?)
            }
            None => (tape.concat(&[pk, k], 1)?, tape.concat(&[pv, v], 1)?),
        };

        let table = tape.param(st, blk.rel_bias);
        let table = tape.reshape(table, &[cfg.n_heads * (cfg.max_t + 1), 1])?;
        let bias = tape.gather_rows(table, &pass.layout.bias_index)?;
        let bias = tape.reshape(bias, &[cfg.n_heads, lq, pass.layout.lk])?;
        let a = tape.attention(q, keys, values, cfg.n_heads, &pass.layout.mask, Some(bias))?;
        let a = tape.reshape(a, &[g * lq, d])?;
        let a = blk.out.apply(tape, st, a)?;
        let x = tape.add(x, a)?;

        let h = modulated_norm(tape, x, shift2, scale2)?;
        let h = blk.mlp_in.apply(tape, st, h)?;
        let h = tape.silu(h)?;
        let h = blk.mlp_out.apply(tape, st, h)?;
        Ok((tape.add(x, h)?, captured))
    }

    /// Full attention across all views' tokens of each frame.
    fn cross_view_block(
        &self,
        tape: &mut Tape,
        blk: &CrossViewBlock,
        x: Var,
        bsz: usize,
        t_len: usize,
    ) -> Result<Var> {
        let cfg = &self.config;
        let (v, s, d) = (cfg.views, cfg.tokens_per_view(), cfg.d_model);
        let h = tape.rms_norm(x, NORM_EPS)?;
        let h = tape.reshape(h, &[bsz, v, t_len, s * d])?;
        let h = tape.permute(h, &[0, 2, 1, 3])?;
        let h = tape.reshape(h, &[bsz * t_len * v * s, d])?;
        let y = cross_view_attention(tape, &self.params, blk, h, bsz * t_len, v * s, cfg.n_heads)?;
        let y = tape.reshape(y, &[bsz, t_len, v, s * d])?;
        let y = tape.permute(y, &[0, 2, 1, 3])?;
        let y = tape.reshape(y, &[bsz * v * t_len * s, d])?;
        Ok(tape.add(x, y)?)
    }

    /// Applies cross-view block `index` to `(frame, view, s)`-ordered tokens `[F * V * S, d]`
    /// without the residual connection. Exposed for structural tests.
    pub fn cross_view_attention(
        &self,
        tape: &mut Tape,
        index: usize,
        h: Var,
        frames: usize,
    ) -> Result<Var> {
        let cfg = &self.config;
        cross_view_attention(
            tape,
            &self.params,
            &self.ids.crossview[index],
            h,
            frames,
            cfg.views * cfg.tokens_per_view(),
            cfg.n_heads,
        )
    }
}

fn cross_view_attention(
    tape: &mut Tape,
    st: &ParamStore,
    blk: &CrossViewBlock,
    h: Var,
    groups: usize,
    len: usize,
    heads: usize,
) -> Result<Var> {
    let d = tape.shape(h)[1];
    let qkv = blk.qkv.apply(tape, st, h)?;
    let q = tape.slice(qkv, 1, 0, d)?;
    let k = tape.slice(qkv, 1, d, d)?;
    let v = tape.slice(qkv, 1, 2 * d, d)?;
    let q = tape.reshape(q, &[groups, len, d])?;
    let k = tape.reshape(k, &[groups, len, d])?;
    let v = tape.reshape(v, &[groups, len, d])?;
    let a = tape.attention(q, k, v, heads, &AttnMask::full(len, len), None)?;
    let a = tape.reshape(a, &[groups * len, d])?;
    blk.out.apply(tape, st, a)
}

/// `rms_norm(x) * (1 + scale) + shift`.
fn modulated_norm(tape: &mut Tape, x: Var, shift: Var, scale: Var) -> Result<Var> {
    let n = tape.rms_norm(x, NORM_EPS)?;
    let ns = tape.mul(n, scale)?;
    let y = tape.add(n, ns)?;
    Ok(tape.add(y, shift)?)
}

impl FrameKv {
    /// Wraps the keys and values captured from a single-frame, batch-1 forward pass.
    pub fn from_capture(position: usize, kv: Vec<(Tensor, Tensor)>) -> Result<Self> {
        let flat = |t: Tensor| -> Result<Tensor> {
            let s = t.shape().to_vec();
            let d = *s.last().unwrap();
            let rows = t.numel() / d;
            Ok(t.reshape(vec![rows, d])?)
        };
        let layers = kv
            .into_iter()
            .map(|(k, v)| Ok((flat(k)?, flat(v)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(FrameKv { position, layers })
    }
}
