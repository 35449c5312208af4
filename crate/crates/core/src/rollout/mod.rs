//! Frame-level autoregressive inference: few-step Euler sampling of each new frame,
//! a sliding reference window with cached keys and values, per-frame condition caching,
//! optional classifier-free guidance and latency instrumentation.

pub mod bench;
pub mod session;

pub use bench::{
    bench, bench_csv, default_grid, parse_grid, write_bench_csv, BenchResult, BenchRow,
    BENCH_HEADER,
};
pub use session::{
    rollout, write_latency_csv, LatencyRecord, RolloutOutput, Session, LATENCY_HEADER,
};

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::model::EncodedCondition;

/// Sampling steps per frame used for autoregressive generation unless configured otherwise.
pub const DEFAULT_STEPS: usize = 3;
/// Reference frames visible to each new frame.
pub const DEFAULT_REF_WINDOW: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub steps: usize,
    /// 1 disables guidance and its extra unconditional pass.
    pub cfg_scale: f32,
    pub kv_cache: bool,
    pub cond_cache: bool,
    pub ref_window: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            steps: DEFAULT_STEPS,
            cfg_scale: 1.0,
            kv_cache: true,
            cond_cache: true,
            ref_window: DEFAULT_REF_WINDOW,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return contract("sampler needs at least one step");
        }
        if !self.cfg_scale.is_finite() || self.cfg_scale < 1.0 {
            return contract(format!(
                "cfg_scale must be a finite value >= 1, got {}",
                self.cfg_scale
            ));
        }
        if self.ref_window == 0 {
            return contract("ref_window must be at least 1");
        }
        Ok(())
    }

    pub fn uses_guidance(&self) -> bool {
        self.cfg_scale != 1.0
    }
}

/// Guided velocity `u_uncond + s * (u_cond - u_uncond)`, written into `u_cond`.
pub fn cfg_combine(u_cond: &mut [f32], u_uncond: &[f32], scale: f32) {
    for (c, u) in u_cond.iter_mut().zip(u_uncond) {
        *c = u + scale * (*c - u);
    }
}

/// Running totals for one session.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counters {
    pub frames: u64,
    /// Velocity evaluations; the guidance pass counts as its own evaluation.
    pub model_evals: u64,
    pub encoder_calls: u64,
    /// Forward passes that only capture a finished frame's keys and values.
    pub kv_fills: u64,
    pub attention_flops: u64,
}

/// Encoded conditioning of the frame currently being denoised.
#[derive(Clone, Debug, Default)]
pub struct CondCache {
    entry: Option<(usize, EncodedCondition)>,
}

impl CondCache {
    /// Returns the cached condition for `frame`, encoding it first if the cache holds an
    /// earlier frame. Asking for a frame older than the cached one is an error.
    pub fn get_or_encode(
        &mut self,
        frame: usize,
        encode: impl FnOnce() -> Result<EncodedCondition>,
    ) -> Result<&EncodedCondition> {
        match &self.entry {
            Some((cached, _)) if *cached > frame => {
                return contract(format!(
                    "condition cache holds frame {cached}; frame {frame} is stale"
                ));
            }
            Some((cached, _)) if *cached == frame => {}
            _ => self.entry = Some((frame, encode()?)),
        }
        Ok(&self.entry.as_ref().unwrap().1)
    }

    pub fn frame(&self) -> Option<usize> {
        self.entry.as_ref().map(|(f, _)| *f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use far_tensor::Tensor;

    fn dummy(tag: f32) -> EncodedCondition {
        EncodedCondition {
            prompt: Tensor::full(vec![1, 1], tag),
            prompt_valid: vec![true],
            features: Tensor::zeros(vec![1, 1]),
        }
    }

    #[test]
    fn guidance_scale_one_returns_conditional() {
        let mut u = vec![1.0, -2.0];
        cfg_combine(&mut u, &[5.0, 7.0], 1.0);
        assert_eq!(u, vec![1.0, -2.0]);
    }

    #[test]
    fn guidance_with_zero_uncond_doubles() {
        let mut u = vec![1.5, -2.0];
        cfg_combine(&mut u, &[0.0, 0.0], 2.0);
        assert_eq!(u, vec![3.0, -4.0]);
    }

    #[test]
    fn cache_encodes_once_per_frame() {
        let mut cache = CondCache::default();
        let mut calls = 0;
        for _ in 0..5 {
            cache
                .get_or_encode(3, || {
                    calls += 1;
                    Ok(dummy(3.0))
                })
                .unwrap();
        }
        assert_eq!(calls, 1);
        let c = cache.get_or_encode(4, || Ok(dummy(4.0))).unwrap();
        assert_eq!(c.prompt.data(), &[4.0]);
    }

    #[test]
    fn stale_frame_is_rejected() {
        let mut cache = CondCache::default();
        cache.get_or_encode(5, || Ok(dummy(0.0))).unwrap();
        let err = cache.get_or_encode(4, || Ok(dummy(0.0))).unwrap_err();
        assert!(err.to_string().contains("stale"), "{err}");
    }

    #[test]
    fn config_validation() {
        assert!(SamplerConfig::default().validate().is_ok());
        assert!(SamplerConfig {
            steps: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(SamplerConfig {
            cfg_scale: 0.5,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(SamplerConfig {
            ref_window: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
