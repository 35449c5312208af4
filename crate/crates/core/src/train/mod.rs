//! Two-stage training: reference-horizon flow matching, then blend forcing alternated
//! one-for-one with reference-horizon steps.

pub mod config;
pub mod data;
pub mod objective;
pub mod steps;

pub use config::{Stage, TrainConfig};
pub use data::TrainData;
pub use objective::{
    blend, fm_loss, sample_flow, BlendState, FlowSample, HorizonDist, DEFAULT_ALPHA_RATE,
    DEFAULT_HORIZON_HEAD, DEFAULT_HORIZON_TAIL,
};
pub use steps::{arhc_step, bf_step, clip_loss, BfOutcome, Clip, StepConfig};

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use far_tensor::AdamW;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::error::{contract, io_err, Result};
use crate::model::{load_checkpoint, save_checkpoint, Checkpoint, Model};
use crate::scene::dataset::CodecInfo;

pub const LOSS_HEADER: &str = "step,stage,loss,alpha";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: u64,
    /// Kind of step taken; blend-forcing runs log their interleaved steps as `Arhc`.
    pub stage: Stage,
    pub loss: f32,
    pub alpha: f32,
}

pub struct Trainer {
    pub model: Model,
    pub optimizer: AdamW,
    pub config: TrainConfig,
    pub blend: BlendState,
    /// Optimizer steps taken in this run.
    pub step: u64,
    pub log: Vec<LossRecord>,
    codec: CodecInfo,
    horizon: HorizonDist,
    rng: ChaCha8Rng,
}

impl Trainer {
    /// Starts from a freshly initialised model. Only valid for the first stage.
    pub fn new(config: TrainConfig, data: &TrainData) -> Result<Self> {
        if config.stage == Stage::Blendforce {
            return contract(
                "blend forcing starts from a checkpoint of the first stage; set `init`",
            );
        }
        config.validate()?;
        let model = Model::new(config.model_config(&data.structure), config.seed)?;
        let optimizer = AdamW::new(config.lr, (0.9, 0.999), config.weight_decay);
        Self::assemble(config, data, model, optimizer, BlendState::new(0.0))
    }

    /// Continues from `ckpt`. Blend forcing requires a checkpoint whose meta records a stage.
    pub fn from_checkpoint(
        config: TrainConfig,
        data: &TrainData,
        ckpt: Checkpoint,
    ) -> Result<Self> {
        config.validate()?;
        let prior = ckpt
            .meta
            .get("stage")
            .and_then(|s| s.as_str())
            .map(str::parse::<Stage>);
        let prior = match prior {
            Some(Ok(stage)) => Some(stage),
            Some(Err(e)) => return Err(e),
            None => None,
        };
        if config.stage == Stage::Blendforce && prior.is_none() {
            return contract("blend forcing needs a checkpoint produced by training");
        }
        let updates = if prior == Some(Stage::Blendforce) {
            ckpt.meta
                .get("alpha_updates")
                .and_then(|v| v.as_u64())
                .unwrap_or(0)
        } else {
            0
        };
        let mut optimizer = ckpt
            .optimizer
            .unwrap_or_else(|| AdamW::new(config.lr, (0.9, 0.999), config.weight_decay));
        optimizer.lr = config.lr;
        optimizer.weight_decay = config.weight_decay;
        let blend = BlendState {
            rate: config.alpha_rate,
            updates,
        };
        Self::assemble(config, data, ckpt.model, optimizer, blend)
    }

    fn assemble(
        config: TrainConfig,
        data: &TrainData,
        model: Model,
        optimizer: AdamW,
        blend: BlendState,
    ) -> Result<Self> {
        data.check_model(&model.config)?;
        let horizon = HorizonDist::new(
            &config.horizon_weights,
            config.horizon_tail,
            config.clip_len,
        )?;
        Ok(Trainer {
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x7261_696e),
            blend: BlendState {
                rate: config.alpha_rate,
                ..blend
            },
            model,
            optimizer,
            codec: data.codec_info(),
            horizon,
            step: 0,
            log: Vec::new(),
            config,
        })
    }

    fn step_config(&self) -> StepConfig {
        let c = &self.config;
        StepConfig {
            batch: c.batch,
            clip_len: c.clip_len,
            p_uncond: c.p_uncond,
            rollout_steps: c.rollout_steps,
            bf_max_len: c.bf_max_len,
            bf_window: c.bf_window,
        }
    }

    /// Takes the next step of the stage's schedule and applies the update.
    pub fn train_step(&mut self, data: &TrainData) -> Result<LossRecord> {
        let sc = self.step_config();
        let blend_turn = self.config.stage == Stage::Blendforce && self.step.is_multiple_of(2);
        let (stage, loss) = if blend_turn {
            let out = bf_step(&mut self.model, data, &sc, &mut self.blend, &mut self.rng)?;
            (Stage::Blendforce, out.loss)
        } else {
            let loss = arhc_step(&mut self.model, data, &sc, &self.horizon, &mut self.rng)?;
            (Stage::Arhc, loss)
        };
        if !loss.is_finite() {
            return contract(format!("loss became {loss} at step {}", self.step));
        }
        if self.config.grad_clip > 0.0 {
            self.model.params.clip_grad_norm(self.config.grad_clip);
        }
        self.optimizer.step(&mut self.model.params)?;
        let record = LossRecord {
            step: self.step,
            stage,
            loss,
            alpha: self.blend.alpha(),
        };
        self.step += 1;
        self.log.push(record);
        Ok(record)
    }

    pub fn meta(&self) -> serde_json::Value {
        json!({
            "stage": self.config.stage,
            "step": self.step,
            "alpha_updates": self.blend.updates,
            "alpha": self.blend.alpha(),
            "codec": self.codec,
            "train_config": self.config,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.model, &self.meta(), Some(&self.optimizer))
    }

    pub fn loss_csv(&self) -> String {
        let mut text = String::from(LOSS_HEADER);
        text.push('\n');
        for r in &self.log {
            writeln!(text, "{},{},{},{}", r.step, r.stage, r.loss, r.alpha).unwrap();
        }
        text
    }
}

/// Path of the intermediate checkpoint written after `step` steps.
pub fn interval_path(out: &Path, step: u64) -> PathBuf {
    let stem = out
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("checkpoint");
    let ext = out.extension().and_then(|s| s.to_str()).unwrap_or("fard");
    out.with_file_name(format!("{stem}.step{step}.{ext}"))
}

/// Runs `config.steps` steps, writing the final checkpoint to `out`, intermediate ones every
/// `ckpt_interval` steps next to it, and the loss log to `loss_csv`.
pub fn train(
    config: TrainConfig,
    data: &TrainData,
    out: &Path,
    loss_csv: &Path,
) -> Result<Trainer> {
    let mut trainer = match &config.init {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            Trainer::from_checkpoint(config, data, ckpt)?
        }
        None => Trainer::new(config, data)?,
    };
    let interval = trainer.config.ckpt_interval as u64;
    for _ in 0..trainer.config.steps {
        trainer.train_step(data)?;
        if interval > 0
            && trainer.step % interval == 0
            && trainer.step < trainer.config.steps as u64
        {
            trainer.save(&interval_path(out, trainer.step))?;
        }
    }
    trainer.save(out)?;
    std::fs::write(loss_csv, trainer.loss_csv()).map_err(io_err(loss_csv))?;
    Ok(trainer)
}
