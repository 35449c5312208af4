//! Scene records paired with their frame latents.

use far_tensor::Tensor;

use crate::codec::PatchCodec;
use crate::error::{contract, Result};
use crate::model::ModelConfig;
use crate::scene::controls::CANVAS_CHANNELS;
use crate::scene::dataset::{CodecInfo, Dataset, SceneRecord};
use crate::scene::world::{CAPTION_LEN, VOCAB_SIZE};

pub struct TrainData {
    pub records: Vec<SceneRecord>,
    /// Per scene, per frame: `[V * S, C]` tokens of the normalised images.
    pub latents: Vec<Vec<Tensor>>,
    pub codec: PatchCodec,
    /// Structural model settings implied by the data; capacity fields keep their defaults.
    pub structure: ModelConfig,
}

impl TrainData {
    pub fn new(records: Vec<SceneRecord>, codec: PatchCodec) -> Result<Self> {
        let Some(first) = records.first() else {
            return contract("training data has no scenes");
        };
        let s = first.frames.shape();
        let (views, height, width) = (s[1], s[2], s[3]);
        let max_boxes = first.controls[0].boxes.len();
        let structure = ModelConfig {
            views,
            image_height: height,
            image_width: width,
            patch: codec.patch(),
            max_boxes,
            canvas_channels: CANVAS_CHANNELS,
            caption_len: CAPTION_LEN,
            vocab_size: VOCAB_SIZE,
            ..Default::default()
        };
        let mut latents = Vec::with_capacity(records.len());
        for (i, rec) in records.iter().enumerate() {
            let rs = rec.frames.shape();
            if rs[1..4] != [views, height, width]
                || rec.controls.iter().any(|c| c.boxes.len() != max_boxes)
            {
                return contract(format!(
                    "scene {i} disagrees with scene 0 on views, image size or box slots"
                ));
            }
            latents.push(
                (0..rec.frames_len())
                    .map(|t| codec.encode_tokens(rec.frame(t), views, height, width))
                    .collect::<Result<Vec<_>>>()?,
            );
        }
        Ok(TrainData {
            records,
            latents,
            codec,
            structure,
        })
    }

    pub fn from_dataset(ds: Dataset) -> Result<Self> {
        let codec = PatchCodec::new(ds.manifest.codec.patch, ds.manifest.codec.seed)?;
        Self::new(ds.scenes, codec)
    }

    pub fn codec_info(&self) -> CodecInfo {
        CodecInfo {
            patch: self.codec.patch(),
            seed: self.codec.seed(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Longest scene, in frames.
    pub fn max_frames(&self) -> usize {
        self.records
            .iter()
            .map(SceneRecord::frames_len)
            .max()
            .unwrap_or(0)
    }

    /// Checks that `model` can consume this data.
    pub fn check_model(&self, model: &ModelConfig) -> Result<()> {
        let s = &self.structure;
        if (
            model.views,
            model.image_height,
            model.image_width,
            model.patch,
            model.max_boxes,
        ) != (s.views, s.image_height, s.image_width, s.patch, s.max_boxes)
        {
            return contract(format!(
                "model expects {} views of {}x{} (patch {}, {} boxes), data has {} views of {}x{} (patch {}, {} boxes)",
                model.views,
                model.image_height,
                model.image_width,
                model.patch,
                model.max_boxes,
                s.views,
                s.image_height,
                s.image_width,
                s.patch,
                s.max_boxes
            ));
        }
        Ok(())
    }
}
