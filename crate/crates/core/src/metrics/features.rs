//! A fixed, seeded random convolutional feature extractor.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{contract, Result};

/// Feature dimension unless configured otherwise.
pub const DEFAULT_FEATURE_DIM: usize = 64;
const WIDTHS: [usize; 3] = [16, 32, 64];

#[derive(Clone, Debug)]
struct Conv {
    cin: usize,
    cout: usize,
    /// `[cout, 3, 3, cin]`.
    w: Vec<f32>,
    b: Vec<f32>,
}

impl Conv {
    fn new(cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = (2.0 / (9 * cin) as f32).sqrt();
        let w = (0..cout * 9 * cin)
            .map(|_| {
                std * {
                    let v: f32 = StandardNormal.sample(&mut *rng);
                    v
                }
            })
            .collect::<Vec<f32>>();
        let b = (0..cout)
            .map(|_| {
                0.1 * {
                    let v: f32 = StandardNormal.sample(&mut *rng);
                    v
                }
            })
            .collect();
        Conv { cin, cout, w, b }
    }

    /// 3x3 convolution, stride 2, zero padding 1, then ReLU. Input and output are `[H, W, C]`.
    fn apply(&self, x: &[f32], h: usize, w: usize) -> (Vec<f32>, usize, usize) {
        let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
        let mut out = vec![0.0; ho * wo * self.cout];
        for i in 0..ho {
            for j in 0..wo {
                let o = &mut out[(i * wo + j) * self.cout..][..self.cout];
                o.copy_from_slice(&self.b);
                for di in 0..3 {
                    let Some(y) = (2 * i + di).checked_sub(1).filter(|&y| y < h) else {
                        continue;
                    };
                    for dj in 0..3 {
                        let Some(xx) = (2 * j + dj).checked_sub(1).filter(|&xx| xx < w) else {
                            continue;
                        };
                        let px = &x[(y * w + xx) * self.cin..][..self.cin];
                        for (co, acc) in o.iter_mut().enumerate() {
                            let k = &self.w[((co * 3 + di) * 3 + dj) * self.cin..][..self.cin];
                            *acc += k.iter().zip(px).map(|(a, b)| a * b).sum::<f32>();
                        }
                    }
                }
                o.iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
        (out, ho, wo)
    }
}

/// Maps an `[H, W, C]` image (or a channel-stacked window of images) to a fixed-length
/// feature vector. The weights are drawn once from the seed and never trained.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    seed: u64,
    in_channels: usize,
    dim: usize,
    convs: Vec<Conv>,
    /// `[dim, 4 * last width]`.
    proj: Vec<f32>,
}

impl FeatureExtractor {
    pub fn new(seed: u64, in_channels: usize, dim: usize) -> Result<Self> {
        if in_channels == 0 || dim == 0 {
            return contract("feature extractor needs at least one input channel and one feature");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut convs = Vec::with_capacity(WIDTHS.len());
        let mut cin = in_channels;
        for &cout in &WIDTHS {
            convs.push(Conv::new(cin, cout, &mut rng));
            cin = cout;
        }
        let fan_in = 4 * cin;
        let std = (1.0 / fan_in as f32).sqrt();
        let proj = (0..dim * fan_in)
            .map(|_| {
                std * {
                    let v: f32 = StandardNormal.sample(&mut rng);
                    v
                }
            })
            .collect();
        Ok(FeatureExtractor {
            seed,
            in_channels,
            dim,
            convs,
            proj,
        })
    }

    /// Extractor for single RGB frames.
    pub fn for_frames(seed: u64) -> Self {
        Self::new(seed, 3, DEFAULT_FEATURE_DIM).unwrap()
    }

    /// Extractor for windows of `window` RGB frames stacked along channels.
    pub fn for_windows(seed: u64, window: usize) -> Result<Self> {
        Self::new(seed, 3 * window, DEFAULT_FEATURE_DIM)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    /// Features of one `[H, W, in_channels]` image with values in `[0, 1]`.
    pub fn features(&self, img: &[f32], h: usize, w: usize) -> Result<Vec<f32>> {
        if img.len() != h * w * self.in_channels || h == 0 || w == 0 {
            return contract(format!(
                "feature input has {} values, expected {h}x{w}x{}",
                img.len(),
                self.in_channels
            ));
        }
        let mut x: Vec<f32> = img.iter().map(|v| v - 0.5).collect();
        let (mut h, mut w) = (h, w);
        for conv in &self.convs {
            (x, h, w) = conv.apply(&x, h, w);
        }
        // Average over image quadrants; a quadrant with no pixels takes the global mean.
        let c = WIDTHS[WIDTHS.len() - 1];
        let mut pooled = vec![0.0; 4 * c];
        let mut counts = [0usize; 4];
        for i in 0..h {
            for j in 0..w {
                let q = (2 * i / h) * 2 + 2 * j / w;
                counts[q] += 1;
                let px = &x[(i * w + j) * c..][..c];
                pooled[q * c..(q + 1) * c]
                    .iter_mut()
                    .zip(px)
                    .for_each(|(p, v)| *p += v);
            }
        }
        let global: Vec<f32> = (0..c)
            .map(|k| (0..4).map(|q| pooled[q * c + k]).sum::<f32>() / (h * w) as f32)
            .collect();
        for (q, &n) in counts.iter().enumerate() {
            let slot = &mut pooled[q * c..(q + 1) * c];
            if n == 0 {
                slot.copy_from_slice(&global);
            } else {
                slot.iter_mut().for_each(|v| *v /= n as f32);
            }
        }
        Ok(self
            .proj
            .chunks(4 * c)
            .map(|row| row.iter().zip(&pooled).map(|(a, b)| a * b).sum())
            .collect())
    }

    /// Features of every view of one frame, `images` being `[V, H, W, 3]`.
    pub fn view_features(
        &self,
        images: &[f32],
        views: usize,
        h: usize,
        w: usize,
    ) -> Result<Vec<Vec<f32>>> {
        if views == 0 || images.len() != views * h * w * self.in_channels {
            return contract("view images do not match the given shape");
        }
        images
            .chunks(h * w * self.in_channels)
            .map(|img| self.features(img, h, w))
            .collect()
    }
}

/// Stacks same-view `[H, W, 3]` images along channels into `[H, W, 3 * n]`.
pub fn stack_window(images: &[&[f32]]) -> Vec<f32> {
    let px = images.first().map_or(0, |i| i.len() / 3);
    let mut out = Vec::with_capacity(px * 3 * images.len());
    for p in 0..px {
        for img in images {
            out.extend_from_slice(&img[p * 3..p * 3 + 3]);
        }
    }
    out
}
