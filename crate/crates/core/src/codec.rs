//! Frame-level orthogonal patch codec.
//!
//! Each `p x p x 3` patch is flattened in `(dy, dx, channel)` order and multiplied by a
//! seeded orthogonal matrix. Frames never interact, so a latent depends on its own frame
//! only.

use far_tensor::Tensor;
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{contract, Result};

pub const DEFAULT_PATCH: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct PatchCodec {
    patch: usize,
    seed: u64,
    /// Row-major `n x n`, `n = 3 p^2`.
    q: Vec<f32>,
}

impl PatchCodec {
    pub fn new(patch: usize, seed: u64) -> Result<Self> {
        if patch == 0 {
            return contract("codec patch size must be positive");
        }
        let n = 3 * patch * patch;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = DMatrix::<f64>::from_fn(n, n, |_, _| StandardNormal.sample(&mut rng));
        let qr = g.qr();
        let (mut q, r) = (qr.q(), qr.r());
        // Fix column signs so the factorization is unique.
        for j in 0..n {
            if r[(j, j)] < 0.0 {
                q.column_mut(j).neg_mut();
            }
        }
        let q = (0..n * n).map(|i| q[(i / n, i % n)] as f32).collect();
        Ok(PatchCodec { patch, seed, q })
    }

    pub fn patch(&self) -> usize {
        self.patch
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn channels(&self) -> usize {
        3 * self.patch * self.patch
    }

    pub fn matrix(&self) -> &[f32] {
        &self.q
    }

    /// Latent grid size for an `h x w` frame.
    pub fn grid(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if !h.is_multiple_of(self.patch) || !w.is_multiple_of(self.patch) {
            return contract(format!(
                "frame {h}x{w} is not divisible by patch size {}",
                self.patch
            ));
        }
        Ok((h / self.patch, w / self.patch))
    }

    /// Encodes one `[H, W, 3]` image into `[H/p, W/p, 3p^2]` values.
    pub fn encode_frame(&self, img: &[f32], h: usize, w: usize) -> Result<Vec<f32>> {
        let (gh, gw) = self.grid(h, w)?;
        if img.len() != h * w * 3 {
            return contract(format!(
                "image has {} values, expected {h}x{w}x3",
                img.len()
            ));
        }
        let (p, n) = (self.patch, self.channels());
        let mut out = vec![0.0; gh * gw * n];
        let mut patch = vec![0.0; n];
        for gi in 0..gh {
            for gj in 0..gw {
                for dy in 0..p {
                    let row = ((gi * p + dy) * w + gj * p) * 3;
                    patch[dy * p * 3..(dy + 1) * p * 3].copy_from_slice(&img[row..row + p * 3]);
                }
                let z = &mut out[(gi * gw + gj) * n..][..n];
                for (i, zi) in z.iter_mut().enumerate() {
                    *zi = self.q[i * n..(i + 1) * n]
                        .iter()
                        .zip(&patch)
                        .map(|(a, b)| a * b)
                        .sum();
                }
            }
        }
        Ok(out)
    }

    /// Inverse of [`encode_frame`](Self::encode_frame).
    pub fn decode_frame(&self, z: &[f32], gh: usize, gw: usize) -> Result<Vec<f32>> {
        let (p, n) = (self.patch, self.channels());
        if z.len() != gh * gw * n {
            return contract(format!(
                "latent has {} values, expected {gh}x{gw}x{n} for patch size {p}",
                z.len()
            ));
        }
        let (h, w) = (gh * p, gw * p);
        let mut img = vec![0.0; h * w * 3];
        let mut patch = vec![0.0; n];
        for gi in 0..gh {
            for gj in 0..gw {
                let zc = &z[(gi * gw + gj) * n..][..n];
                patch.iter_mut().for_each(|x| *x = 0.0);
                for (i, &zi) in zc.iter().enumerate() {
                    for (x, q) in patch.iter_mut().zip(&self.q[i * n..(i + 1) * n]) {
                        *x += q * zi;
                    }
                }
                for dy in 0..p {
                    let row = ((gi * p + dy) * w + gj * p) * 3;
                    img[row..row + p * 3].copy_from_slice(&patch[dy * p * 3..(dy + 1) * p * 3]);
                }
            }
        }
        Ok(img)
    }

    /// Encodes a tensor of frames `[..., H, W, 3]` into `[..., H/p, W/p, 3p^2]`, frame by frame.
    pub fn encode(&self, frames: &Tensor) -> Result<Tensor> {
        let s = frames.shape();
        if s.len() < 3 || s[s.len() - 1] != 3 {
            return contract(format!("encode expects [..., H, W, 3], got {s:?}"));
        }
        let (h, w) = (s[s.len() - 3], s[s.len() - 2]);
        let (gh, gw) = self.grid(h, w)?;
        let mut out = Vec::with_capacity(frames.numel());
        for img in frames.data().chunks(h * w * 3) {
            out.extend(self.encode_frame(img, h, w)?);
        }
        let mut shape = s[..s.len() - 3].to_vec();
        shape.extend([gh, gw, self.channels()]);
        Ok(Tensor::new(shape, out)?)
    }

    /// Decodes `[..., gh, gw, 3p^2]` latents into `[..., H, W, 3]` frames.
    pub fn decode(&self, latents: &Tensor) -> Result<Tensor> {
        let s = latents.shape();
        if s.len() < 3 || s[s.len() - 1] != self.channels() {
            return contract(format!(
                "decode expects [..., gh, gw, {}], got {s:?}",
                self.channels()
            ));
        }
        let (gh, gw) = (s[s.len() - 3], s[s.len() - 2]);
        let mut out = Vec::with_capacity(latents.numel());
        for z in latents.data().chunks(gh * gw * self.channels()) {
            out.extend(self.decode_frame(z, gh, gw)?);
        }
        let mut shape = s[..s.len() - 3].to_vec();
        shape.extend([gh * self.patch, gw * self.patch, 3]);
        Ok(Tensor::new(shape, out)?)
    }

    /// Maps `[0, 1]` pixels to `[-1, 1]` and encodes; the model works on these latents.
    pub fn encode_normalized(&self, frames: &Tensor) -> Result<Tensor> {
        let scaled = Tensor::new(
            frames.shape().to_vec(),
            frames.data().iter().map(|x| 2.0 * x - 1.0).collect(),
        )?;
        self.encode(&scaled)
    }

    /// Encodes one multi-view frame of `[0, 1]` images `[V, H, W, 3]` into model tokens `[V * S, C]`.
    pub fn encode_tokens(
        &self,
        images: &[f32],
        views: usize,
        height: usize,
        width: usize,
    ) -> Result<Tensor> {
        let frames = Tensor::new(vec![views, height, width, 3], images.to_vec())?;
        let z = self.encode_normalized(&frames)?;
        let rows = z.numel() / self.channels();
        Ok(z.reshape(vec![rows, self.channels()])?)
    }

    /// Inverse of [`encode_tokens`](Self::encode_tokens): `[V * S, C]` tokens to `[V, H, W, 3]` images.
    pub fn decode_tokens(
        &self,
        tokens: &Tensor,
        views: usize,
        height: usize,
        width: usize,
    ) -> Result<Tensor> {
        let (gh, gw) = self.grid(height, width)?;
        if tokens.shape() != [views * gh * gw, self.channels()] {
            return contract(format!(
                "tokens have shape {:?}, expected [{}, {}]",
                tokens.shape(),
                views * gh * gw,
                self.channels()
            ));
        }
        let z = tokens
            .clone()
            .reshape(vec![views, gh, gw, self.channels()])?;
        self.decode_normalized(&z)
    }

    /// Inverse of [`encode_normalized`](Self::encode_normalized), clamped to `[0, 1]`.
    pub fn decode_normalized(&self, latents: &Tensor) -> Result<Tensor> {
        let img = self.decode(latents)?;
        let shape = img.shape().to_vec();
        Ok(Tensor::new(
            shape,
            img.into_data()
                .into_iter()
                .map(|x| (0.5 * (x + 1.0)).clamp(0.0, 1.0))
                .collect(),
        )?)
    }
}
