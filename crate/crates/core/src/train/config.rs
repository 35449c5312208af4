//! Flat `key = value` training configuration.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::objective::{DEFAULT_ALPHA_RATE, DEFAULT_HORIZON_HEAD, DEFAULT_HORIZON_TAIL};
use crate::error::{contract, FarError, Result};
use crate::model::ModelConfig;
use crate::rollout::{DEFAULT_REF_WINDOW, DEFAULT_STEPS};
use far_tensor::DEFAULT_LR;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    /// Flow matching with a randomly drawn number of clean reference frames.
    Arhc,
    /// Self-conditioning on blended rollouts, alternated with `Arhc` steps.
    Blendforce,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Arhc => "arhc",
            Stage::Blendforce => "blendforce",
        })
    }
}

impl FromStr for Stage {
    type Err = FarError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "arhc" => Ok(Stage::Arhc),
            "blendforce" => Ok(Stage::Blendforce),
            _ => contract(format!("unknown stage `{s}` (expected arhc or blendforce)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub lr: f32,
    pub weight_decay: f32,
    pub batch: usize,
    pub steps: usize,
    /// Frames per training clip.
    pub clip_len: usize,
    pub alpha_rate: f64,
    pub horizon_weights: Vec<f32>,
    pub horizon_tail: f32,
    /// Euler steps of the rollouts used for self-conditioning.
    pub rollout_steps: usize,
    /// Longest self-generated history.
    pub bf_max_len: usize,
    /// Reference frames visible to the supervised frame during self-conditioning.
    pub bf_window: usize,
    /// Probability of dropping a sample's conditions, enabling guidance at inference.
    pub p_uncond: f32,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f32,
    /// Write an intermediate checkpoint every this many steps; 0 writes only the final one.
    pub ckpt_interval: usize,
    pub seed: u64,
    /// Checkpoint to start from; required for `blendforce`.
    pub init: Option<PathBuf>,
    pub d_model: usize,
    pub n_heads: usize,
    pub backbone_depth: usize,
    pub control_depth: usize,
    pub crossview_period: usize,
    pub max_t: usize,
    pub mlp_ratio: usize,
    pub prompt_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        TrainConfig {
            stage: Stage::Arhc,
            lr: DEFAULT_LR,
            weight_decay: 0.0,
            batch: 4,
            steps: 1000,
            clip_len: 8,
            alpha_rate: DEFAULT_ALPHA_RATE,
            horizon_weights: DEFAULT_HORIZON_HEAD.to_vec(),
            horizon_tail: DEFAULT_HORIZON_TAIL,
            rollout_steps: DEFAULT_STEPS,
            bf_max_len: 16,
            bf_window: DEFAULT_REF_WINDOW,
            p_uncond: 0.1,
            grad_clip: 1.0,
            ckpt_interval: 0,
            seed: 0,
            init: None,
            d_model: m.d_model,
            n_heads: m.n_heads,
            backbone_depth: m.backbone_depth,
            control_depth: m.control_depth,
            crossview_period: m.crossview_period,
            max_t: m.max_t,
            mlp_ratio: m.mlp_ratio,
            prompt_dim: m.prompt_dim,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| FarError::Contract(format!("config key `{key}`: cannot parse `{value}`")))
}

impl TrainConfig {
    pub const KEYS: [&'static str; 25] = [
        "stage",
        "lr",
        "weight_decay",
        "batch",
        "steps",
        "clip_len",
        "alpha_rate",
        "horizon_weights",
        "horizon_tail",
        "rollout_steps",
        "bf_max_len",
        "bf_window",
        "p_uncond",
        "grad_clip",
        "ckpt_interval",
        "seed",
        "init",
        "d_model",
        "n_heads",
        "backbone_depth",
        "control_depth",
        "crossview_period",
        "max_t",
        "mlp_ratio",
        "prompt_dim",
    ];

    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "stage" => self.stage = value.parse()?,
            "lr" => self.lr = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "batch" => self.batch = parse(key, value)?,
            "steps" => self.steps = parse(key, value)?,
            "clip_len" => self.clip_len = parse(key, value)?,
            "alpha_rate" => self.alpha_rate = parse(key, value)?,
            "horizon_weights" => {
                self.horizon_weights = value
                    .split(',')
                    .map(|w| parse(key, w.trim()))
                    .collect::<Result<_>>()?
            }
            "horizon_tail" => self.horizon_tail = parse(key, value)?,
            "rollout_steps" => self.rollout_steps = parse(key, value)?,
            "bf_max_len" => self.bf_max_len = parse(key, value)?,
            "bf_window" => self.bf_window = parse(key, value)?,
            "p_uncond" => self.p_uncond = parse(key, value)?,
            "grad_clip" => self.grad_clip = parse(key, value)?,
            "ckpt_interval" => self.ckpt_interval = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "init" => self.init = (!value.is_empty()).then(|| PathBuf::from(value)),
            "d_model" => self.d_model = parse(key, value)?,
            "n_heads" => self.n_heads = parse(key, value)?,
            "backbone_depth" => self.backbone_depth = parse(key, value)?,
            "control_depth" => self.control_depth = parse(key, value)?,
            "crossview_period" => self.crossview_period = parse(key, value)?,
            "max_t" => self.max_t = parse(key, value)?,
            "mlp_ratio" => self.mlp_ratio = parse(key, value)?,
            "prompt_dim" => self.prompt_dim = parse(key, value)?,
            _ => return contract(format!("unknown config key `{key}`")),
        }
        Ok(())
    }

    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return contract(format!("config line {}: expected key = value", i + 1));
            };
            cfg.set(key.trim(), value)
                .map_err(|e| FarError::Contract(format!("config line {}: {e}", i + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return contract("lr must be positive");
        }
        if self.batch == 0 || self.clip_len == 0 || self.rollout_steps == 0 || self.bf_window == 0 {
            return contract("batch, clip_len, rollout_steps and bf_window must be at least 1");
        }
        if self.bf_max_len < 2 {
            return contract("bf_max_len must be at least 2");
        }
        if !(0.0..=1.0).contains(&self.p_uncond) {
            return contract("p_uncond must lie in [0, 1]");
        }
        if self.alpha_rate.is_nan()
            || self.alpha_rate < 0.0
            || self.grad_clip.is_nan()
            || self.grad_clip < 0.0
        {
            return contract("alpha_rate and grad_clip must be non-negative");
        }
        super::objective::HorizonDist::new(
            &self.horizon_weights,
            self.horizon_tail,
            self.clip_len,
        )?;
        Ok(())
    }

    /// Model shape for data with the given structural settings.
    pub fn model_config(&self, data: &ModelConfig) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            backbone_depth: self.backbone_depth,
            control_depth: self.control_depth,
            crossview_period: self.crossview_period,
            max_t: self.max_t,
            mlp_ratio: self.mlp_ratio,
            prompt_dim: self.prompt_dim,
            ..data.clone()
        }
    }
}
