//! Quality proxies: Fréchet feature distances, layout adherence and degradation curves
//! over rollout length.
//!
//! Feature distances come from a fixed random extractor, so absolute values only support
//! comparisons between runs scored with the same extractor seed.

pub mod features;
pub mod frechet;

pub use features::{stack_window, FeatureExtractor, DEFAULT_FEATURE_DIM};
pub use frechet::{feature_distance, frechet_distance, GaussianSummary, PSD_TOL};

use std::fmt::Write as _;
use std::path::Path;

use far_tensor::Tensor;

use crate::codec::PatchCodec;
use crate::error::{contract, io_err, Result};
use crate::model::Model;
use crate::rollout::{rollout, RolloutOutput, SamplerConfig};
use crate::scene::{SceneRecord, AGENT_COLORS, CANVAS_CHANNELS, ROAD_COLOR};

/// Per-channel tolerance when matching a generated pixel to a reserved colour.
pub const COLOR_TOL: f32 = 0.15;
/// Frames per stacked window for the video distance, and frames per tail window of a curve.
pub const WINDOW: usize = 8;
pub const METRICS_HEADER: &str = "metric,length,value,seed,checkpoint";

fn near(px: &[f32], color: &[f32; 3]) -> bool {
    px.iter()
        .zip(color)
        .all(|(a, b)| (a - b).abs() <= COLOR_TOL)
}

/// Intersection over union of two masks; two empty masks agree perfectly.
pub fn mask_iou(a: &[bool], b: &[bool]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Which canvas-derived mask a layout score compares against.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayoutTarget {
    /// Road pixels not hidden behind a box, matched against the road colour.
    Road,
    /// Box pixels, matched against any agent colour.
    Boxes,
}

fn masks(image: &[f32], canvas: &[f32], target: LayoutTarget) -> (Vec<bool>, Vec<bool>) {
    image
        .chunks(3)
        .zip(canvas.chunks(CANVAS_CHANNELS))
        .map(|(px, cv)| match target {
            LayoutTarget::Road => (near(px, &ROAD_COLOR), cv[0] > 0.5 && cv[1] <= 0.5),
            LayoutTarget::Boxes => (AGENT_COLORS.iter().any(|c| near(px, c)), cv[1] > 0.5),
        })
        .unzip()
}

/// Mean IoU over frames and views between colour-thresholded generated pixels and the
/// layout canvases. `frames[i]` is `[V, H, W, 3]` and `canvases[i]` is `[V, H, W, 2]`,
/// both with `pixels_per_view` pixels per view.
pub fn layout_adherence(
    frames: &[&[f32]],
    canvases: &[&[f32]],
    pixels_per_view: usize,
    target: LayoutTarget,
) -> Result<f64> {
    if frames.is_empty() || frames.len() != canvases.len() || pixels_per_view == 0 {
        return contract(format!(
            "layout adherence needs matching non-empty frame and canvas lists, got {} and {}",
            frames.len(),
            canvases.len()
        ));
    }
    let (mut total, mut count) = (0.0, 0usize);
    for (img, cv) in frames.iter().zip(canvases) {
        let views = img.len() / (pixels_per_view * 3);
        if views == 0
            || img.len() != views * pixels_per_view * 3
            || cv.len() != views * pixels_per_view * CANVAS_CHANNELS
        {
            return contract("frame and canvas sizes disagree");
        }
        for v in 0..views {
            let (g, r) = masks(
                &img[v * pixels_per_view * 3..][..pixels_per_view * 3],
                &cv[v * pixels_per_view * CANVAS_CHANNELS..][..pixels_per_view * CANVAS_CHANNELS],
                target,
            );
            total += mask_iou(&g, &r);
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Least-squares slope of `ys` against `xs`.
pub fn slope(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return contract("slope needs at least two paired points");
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return contract("slope needs at least two distinct x values");
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    Ok(sxy / sxx)
}

/// Scores at one rollout length.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvePoint {
    pub length: usize,
    /// Frame-level distance over the last [`WINDOW`] frames up to `length`.
    pub fd: f64,
    /// Distance between stacked-window features of the same frames.
    pub fvd: f64,
    pub road_iou: f64,
    pub box_iou: f64,
}

impl CurvePoint {
    pub fn rows(&self, seed: u64, checkpoint: &str) -> Vec<MetricRow> {
        [
            ("fd", self.fd),
            ("fvd", self.fvd),
            ("road_iou", self.road_iou),
            ("box_iou", self.box_iou),
        ]
        .into_iter()
        .map(|(metric, value)| MetricRow {
            metric: metric.to_string(),
            length: self.length,
            value,
            seed,
            checkpoint: checkpoint.to_string(),
        })
        .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub metric: String,
    pub length: usize,
    pub value: f64,
    pub seed: u64,
    pub checkpoint: String,
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut text = String::from(METRICS_HEADER);
    text.push('\n');
    for r in rows {
        writeln!(
            text,
            "{},{},{},{},{}",
            r.metric, r.length, r.value, r.seed, r.checkpoint
        )
        .unwrap();
    }
    text
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    std::fs::write(path, metrics_csv(rows)).map_err(io_err(path))
}

/// Scores predicted scenes against reference scenes at each length. Frame `i` of a
/// prediction is compared with frame `i` of its reference; at length `L` the window is
/// frames `L - WINDOW + 1 ..= L`, so every prediction needs at least `max(lengths) + 1`
/// frames (frame 0 being the shared starting frame).
pub fn score_lengths(
    pred: &[SceneRecord],
    reference: &[SceneRecord],
    lengths: &[usize],
    feature_seed: u64,
) -> Result<Vec<CurvePoint>> {
    if pred.is_empty() || pred.len() != reference.len() {
        return contract(format!(
            "{} predicted scenes for {} reference scenes",
            pred.len(),
            reference.len()
        ));
    }
    let Some(&max_len) = lengths.iter().max() else {
        return contract("no rollout lengths given");
    };
    if lengths.iter().any(|&l| l < WINDOW) {
        return contract(format!("rollout lengths must be at least {WINDOW}"));
    }
    let shape = pred[0].frames.shape().to_vec();
    let (views, h, w) = (shape[1], shape[2], shape[3]);
    for (p, r) in pred.iter().zip(reference) {
        if p.frames.shape()[1..] != shape[1..] || r.frames.shape()[1..] != shape[1..] {
            return contract("predicted and reference frames must share views and resolution");
        }
        if p.frames_len() <= max_len || r.frames_len() <= max_len {
            return contract(format!(
                "length {max_len} needs {} frames but a scene has {}",
                max_len + 1,
                p.frames_len().min(r.frames_len())
            ));
        }
    }
    let frame_ext = FeatureExtractor::for_frames(feature_seed);
    let window_ext = FeatureExtractor::for_windows(feature_seed, WINDOW)?;
    let px = h * w;

    let frame_features = |set: &[SceneRecord], idx: &[usize]| -> Result<Vec<Vec<f32>>> {
        let mut out = Vec::new();
        for rec in set {
            for &t in idx {
                out.extend(frame_ext.view_features(rec.frame(t), views, h, w)?);
            }
        }
        Ok(out)
    };
    let window_features = |set: &[SceneRecord], idx: &[usize]| -> Result<Vec<Vec<f32>>> {
        let mut out = Vec::new();
        for rec in set {
            for v in 0..views {
                let imgs: Vec<&[f32]> = idx
                    .iter()
                    .map(|&t| &rec.frame(t)[v * px * 3..][..px * 3])
                    .collect();
                out.push(window_ext.features(&stack_window(&imgs), h, w)?);
            }
        }
        Ok(out)
    };

    let mut points = Vec::with_capacity(lengths.len());
    for &length in lengths {
        let idx: Vec<usize> = (length + 1 - WINDOW..=length).collect();
        let fd = feature_distance(
            &frame_features(pred, &idx)?,
            &frame_features(reference, &idx)?,
        )?;
        let fvd = feature_distance(
            &window_features(pred, &idx)?,
            &window_features(reference, &idx)?,
        )?;
        let mut imgs = Vec::new();
        let mut cvs = Vec::new();
        for (p, r) in pred.iter().zip(reference) {
            for &t in &idx {
                imgs.push(p.frame(t));
                cvs.push(r.canvas(t));
            }
        }
        points.push(CurvePoint {
            length,
            fd,
            fvd,
            road_iou: layout_adherence(&imgs, &cvs, px, LayoutTarget::Road)?,
            box_iou: layout_adherence(&imgs, &cvs, px, LayoutTarget::Boxes)?,
        });
    }
    Ok(points)
}

/// Rolls `model` out from ground-truth frame 0 of `scene`, driven by the scene's controls,
/// for `len` frames. The returned record holds frame 0 followed by the generated frames,
/// with the scene's controls and canvases; the rollout output carries timings and counters.
pub fn rollout_scene(
    model: &Model,
    codec: &PatchCodec,
    sampler: &SamplerConfig,
    scene: &SceneRecord,
    len: usize,
) -> Result<(SceneRecord, RolloutOutput)> {
    let cfg = &model.config;
    let want = [cfg.views, cfg.image_height, cfg.image_width, 3];
    if scene.frames.shape()[1..] != want || scene.controls[0].boxes.len() != cfg.max_boxes {
        return contract(format!(
            "scene frames {:?} with {} box slots do not fit a model for {want:?} with {}",
            &scene.frames.shape()[1..],
            scene.controls[0].boxes.len(),
            cfg.max_boxes
        ));
    }
    if scene.frames_len() <= len {
        return contract(format!(
            "a {len}-frame rollout needs {} control states but the scene has {}",
            len + 1,
            scene.frames_len()
        ));
    }
    let first =
        codec.encode_tokens(scene.frame(0), cfg.views, cfg.image_height, cfg.image_width)?;
    let out = rollout(
        model,
        codec,
        sampler,
        Some((&first, &scene.controls[0])),
        &scene.controls[1..],
        len,
    )?;
    let mut frames = scene.frame(0).to_vec();
    for img in &out.images {
        frames.extend_from_slice(img.data());
    }
    let mut shape = scene.frames.shape().to_vec();
    shape[0] = len + 1;
    let mut canvas_shape = scene.canvases.shape().to_vec();
    canvas_shape[0] = len + 1;
    let per = scene.canvases.numel() / scene.frames_len();
    let record = SceneRecord {
        frames: Tensor::new(shape, frames)?,
        controls: scene.controls[..=len].to_vec(),
        canvases: Tensor::new(
            canvas_shape,
            scene.canvases.data()[..(len + 1) * per].to_vec(),
        )?,
    };
    Ok((record, out))
}

/// Rolls each held-out scene out once to the longest length and scores every length
/// against the ground truth.
pub fn degradation_curve(
    model: &Model,
    codec: &PatchCodec,
    sampler: &SamplerConfig,
    scenes: &[SceneRecord],
    lengths: &[usize],
    feature_seed: u64,
) -> Result<Vec<CurvePoint>> {
    let Some(&max_len) = lengths.iter().max() else {
        return contract("no rollout lengths given");
    };
    let pred = scenes
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let cfg = SamplerConfig {
                seed: sampler.seed.wrapping_add(i as u64),
                ..sampler.clone()
            };
            rollout_scene(model, codec, &cfg, s, max_len).map(|(rec, _)| rec)
        })
        .collect::<Result<Vec<_>>>()?;
    let reference: Vec<SceneRecord> = scenes.to_vec();
    score_lengths(&pred, &reference, lengths, feature_seed)
}
