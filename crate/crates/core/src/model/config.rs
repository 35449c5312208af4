use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::scene::world::{CAPTION_LEN, VOCAB_SIZE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub backbone_depth: usize,
    pub control_depth: usize,
    /// One cross-view block follows every `crossview_period` backbone blocks.
    pub crossview_period: usize,
    pub views: usize,
    /// Frame distances at or beyond this share one temporal bias bucket.
    pub max_t: usize,
    pub patch: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub prompt_dim: usize,
    pub canvas_channels: usize,
    pub caption_len: usize,
    pub vocab_size: usize,
    pub max_boxes: usize,
    pub mlp_ratio: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_heads: 4,
            backbone_depth: 4,
            control_depth: 2,
            crossview_period: 2,
            views: 3,
            max_t: 16,
            patch: 4,
            image_height: 32,
            image_width: 32,
            prompt_dim: 64,
            canvas_channels: 2,
            caption_len: CAPTION_LEN,
            vocab_size: VOCAB_SIZE,
            max_boxes: 8,
            mlp_ratio: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return contract(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.backbone_depth == 0 || self.control_depth > self.backbone_depth {
            return contract(format!(
                "control_depth {} must not exceed backbone_depth {} (which must be positive)",
                self.control_depth, self.backbone_depth
            ));
        }
        if self.crossview_period == 0 {
            return contract("crossview_period must be at least 1");
        }
        if self.patch == 0
            || !self.image_height.is_multiple_of(self.patch)
            || !self.image_width.is_multiple_of(self.patch)
        {
            return contract(format!(
                "image {}x{} is not divisible by patch {}",
                self.image_height, self.image_width, self.patch
            ));
        }
        if self.views == 0 || self.max_t == 0 || self.prompt_dim == 0 || self.mlp_ratio == 0 {
            return contract("views, max_t, prompt_dim and mlp_ratio must be positive");
        }
        Ok(())
    }

    pub fn latent_h(&self) -> usize {
        self.image_height / self.patch
    }

    pub fn latent_w(&self) -> usize {
        self.image_width / self.patch
    }

    /// Latent tokens per view per frame.
    pub fn tokens_per_view(&self) -> usize {
        self.latent_h() * self.latent_w()
    }

    pub fn latent_channels(&self) -> usize {
        3 * self.patch * self.patch
    }

    /// Scene prompt length: caption, one token per camera, box slots, ego motion.
    pub fn prompt_len(&self) -> usize {
        self.caption_len + self.views + self.max_boxes + 1
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Number of cross-view blocks in the backbone.
    pub fn crossview_blocks(&self) -> usize {
        self.backbone_depth / self.crossview_period
    }

    /// Temporal attention layers whose key/value cache a rollout keeps: backbone then control.
    pub fn temporal_layers(&self) -> usize {
        self.backbone_depth + self.control_depth
    }
}
