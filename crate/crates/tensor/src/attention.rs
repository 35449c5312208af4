//! Fused multi-head masked attention kernels.

use crate::error::{contract, Result};
use crate::kernels::{gemm, MatRef};
use crate::tape::Var;

/// Additive score applied to disallowed positions before the softmax.
pub const MASK_VALUE: f32 = -1e9;

/// Boolean attention mask (`true` = may attend), optionally different per group.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnMask {
    lq: usize,
    lk: usize,
    masks: Vec<Vec<bool>>,
    assign: Vec<usize>,
}

impl AttnMask {
    /// One `[lq, lk]` mask shared by every group.
    pub fn shared(lq: usize, lk: usize, allowed: Vec<bool>) -> Result<Self> {
        Self::per_group(lq, lk, vec![allowed], Vec::new())
    }

    pub fn full(lq: usize, lk: usize) -> Self {
        Self::shared(lq, lk, vec![true; lq * lk]).unwrap()
    }

    /// Distinct masks; group `g` uses `masks[assign[g]]`. An empty `assign` means mask 0 for all.
    pub fn per_group(
        lq: usize,
        lk: usize,
        masks: Vec<Vec<bool>>,
        assign: Vec<usize>,
    ) -> Result<Self> {
        if masks.is_empty() {
            return contract("attention mask", "no masks given");
        }
        for (mi, m) in masks.iter().enumerate() {
            if m.len() != lq * lk {
                return contract(
                    "attention mask",
                    format!("mask {mi} has {} entries, expected {lq}x{lk}", m.len()),
                );
            }
            if let Some(row) = (0..lq).find(|&i| !m[i * lk..(i + 1) * lk].iter().any(|&a| a)) {
                return contract(
                    "attention mask",
                    format!("query row {row} of mask {mi} has no allowed key"),
                );
            }
        }
        if let Some(&bad) = assign.iter().find(|&&a| a >= masks.len()) {
            return contract(
                "attention mask",
                format!("group assigned to missing mask {bad}"),
            );
        }
        Ok(AttnMask {
            lq,
            lk,
            masks,
            assign,
        })
    }

    pub fn lq(&self) -> usize {
        self.lq
    }

    pub fn lk(&self) -> usize {
        self.lk
    }

    pub fn for_group(&self, g: usize) -> &[bool] {
        let idx = if self.assign.is_empty() {
            0
        } else {
            self.assign[g]
        };
        &self.masks[idx]
    }

    pub(crate) fn check(&self, groups: usize, lq: usize, lk: usize) -> Result<()> {
        if self.lq != lq || self.lk != lk {
            return contract(
                "attention",
                format!("mask is {}x{} but scores are {lq}x{lk}", self.lq, self.lk),
            );
        }
        if !self.assign.is_empty() && self.assign.len() != groups {
            return contract(
                "attention",
                format!(
                    "mask assigns {} groups, input has {groups}",
                    self.assign.len()
                ),
            );
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Dims {
    pub g: usize,
    pub lq: usize,
    pub lk: usize,
    pub d: usize,
    pub heads: usize,
}

impl Dims {
    fn dh(&self) -> usize {
        self.d / self.heads
    }

    fn scale(&self) -> f32 {
        1.0 / (self.dh() as f32).sqrt()
    }
}

pub(crate) struct AttentionSaved {
    pub q: Var,
    pub k: Var,
    pub v: Var,
    pub bias: Option<Var>,
    pub probs: Vec<f32>,
    pub dims: Dims,
}

pub(crate) fn softmax_row(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    let inv = 1.0 / sum;
    row.iter_mut().for_each(|x| *x *= inv);
}

fn head<'a>(data: &'a [f32], g: usize, h: usize, len: usize, dims: Dims) -> MatRef<'a> {
    let dh = dims.dh();
    MatRef {
        data: &data[g * len * dims.d + h * dh..],
        rows: len,
        cols: dh,
        row_stride: dims.d,
        col_stride: 1,
    }
}

/// Returns the output `[g, lq, d]` and the attention probabilities `[g, heads, lq, lk]`.
pub(crate) fn forward(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    bias: Option<&[f32]>,
    mask: &AttnMask,
    dims: Dims,
) -> (Vec<f32>, Vec<f32>) {
    let Dims {
        g,
        lq,
        lk,
        d,
        heads,
    } = dims;
    let dh = dims.dh();
    let mut out = vec![0.0; g * lq * d];
    let mut probs = vec![0.0; g * heads * lq * lk];
    for gi in 0..g {
        let allowed = mask.for_group(gi);
        for h in 0..heads {
            let p = &mut probs[(gi * heads + h) * lq * lk..(gi * heads + h + 1) * lq * lk];
            gemm(
                dims.scale(),
                head(q, gi, h, lq, dims),
                head(k, gi, h, lk, dims).t(),
                0.0,
                p,
                lk,
                1,
            );
            if let Some(b) = bias {
                let b = &b[h * lq * lk..(h + 1) * lq * lk];
                p.iter_mut().zip(b).for_each(|(s, b)| *s += b);
            }
            p.iter_mut()
                .zip(allowed)
                .filter(|(_, &a)| !a)
                .for_each(|(s, _)| *s += MASK_VALUE);
            p.chunks_mut(lk).for_each(softmax_row);
            let o = &mut out[gi * lq * d + h * dh..];
            gemm(
                1.0,
                MatRef::row_major(p, lq, lk),
                head(v, gi, h, lk, dims),
                0.0,
                o,
                d,
                1,
            );
        }
    }
    (out, probs)
}

pub(crate) struct AttentionGrads {
    pub dq: Vec<f32>,
    pub dk: Vec<f32>,
    pub dv: Vec<f32>,
    pub dbias: Option<Vec<f32>>,
}

pub(crate) fn backward(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    probs: &[f32],
    dout: &[f32],
    dims: Dims,
    want_bias: bool,
) -> AttentionGrads {
    let Dims {
        g,
        lq,
        lk,
        d,
        heads,
    } = dims;
    let dh = dims.dh();
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    let mut dbias = want_bias.then(|| vec![0.0; heads * lq * lk]);
    let mut ds = vec![0.0; lq * lk];
    for gi in 0..g {
        for h in 0..heads {
            let p = &probs[(gi * heads + h) * lq * lk..(gi * heads + h + 1) * lq * lk];
            let pm = MatRef::row_major(p, lq, lk);
            let d_o = head(dout, gi, h, lq, dims);
            let koff = gi * lk * d + h * dh;
            let qoff = gi * lq * d + h * dh;
            gemm(1.0, pm.t(), d_o, 1.0, &mut dv[koff..], d, 1);
            gemm(1.0, d_o, head(v, gi, h, lk, dims).t(), 0.0, &mut ds, lk, 1);
            for (srow, prow) in ds.chunks_mut(lk).zip(p.chunks(lk)) {
                let dot: f32 = srow.iter().zip(prow).map(|(s, p)| s * p).sum();
                srow.iter_mut()
                    .zip(prow)
                    .for_each(|(s, p)| *s = p * (*s - dot));
            }
            if let Some(db) = dbias.as_mut() {
                db[h * lq * lk..(h + 1) * lq * lk]
                    .iter_mut()
                    .zip(&ds)
                    .for_each(|(b, s)| *b += s);
            }
            let dsm = MatRef::row_major(&ds, lq, lk);
            gemm(
                dims.scale(),
                dsm,
                head(k, gi, h, lk, dims),
                1.0,
                &mut dq[qoff..],
                d,
                1,
            );
            gemm(
                dims.scale(),
                dsm.t(),
                head(q, gi, h, lq, dims),
                1.0,
                &mut dk[koff..],
                d,
                1,
            );
        }
    }
    AttentionGrads { dq, dk, dv, dbias }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{Tape, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn lower_triangular(n: usize) -> Vec<bool> {
        (0..n * n).map(|i| i % n <= i / n).collect()
    }

    #[test]
    fn single_token_returns_value() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 1, 4], vec![0.3, -1.0, 2.0, 0.5]).unwrap());
        let y = tape
            .attention(x, x, x, 2, &AttnMask::full(1, 1), None)
            .unwrap();
        assert_eq!(tape.data(y), tape.data(x));
    }

    #[test]
    fn causal_first_row_sees_only_first_value() {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let v = tape.constant(Tensor::new(vec![1, 2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap());
        let mask = AttnMask::shared(2, 2, lower_triangular(2)).unwrap();
        let y = tape.attention(q, q, v, 1, &mask, None).unwrap();
        assert_eq!(&tape.data(y)[..2], &[5.0, 6.0]);
    }

    #[test]
    fn future_value_perturbation_does_not_leak() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = Tensor::randn(vec![1, 2, 4], 1.0, &mut rng);
        let k = Tensor::randn(vec![1, 2, 4], 1.0, &mut rng);
        let v = Tensor::randn(vec![1, 2, 4], 1.0, &mut rng);
        let mut v2 = v.clone();
        v2.data_mut()[4..].iter_mut().for_each(|x| *x += 10.0);
        let mask = AttnMask::shared(2, 2, lower_triangular(2)).unwrap();
        let run = |v: Tensor| {
            let mut tape = Tape::new();
            let (q, k, v) = (
                tape.constant(q.clone()),
                tape.constant(k.clone()),
                tape.constant(v),
            );
            let y = tape.attention(q, k, v, 2, &mask, None).unwrap();
            tape.data(y).to_vec()
        };
        assert_eq!(run(v)[..4], run(v2)[..4]);
    }

    #[test]
    fn fully_masked_row_is_rejected() {
        let err = AttnMask::shared(2, 2, vec![true, false, false, false]).unwrap_err();
        assert!(err.to_string().contains("row 1"), "{err}");
    }

    #[test]
    fn mask_shape_must_match_scores() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![1, 3, 2]));
        assert!(tape
            .attention(x, x, x, 1, &AttnMask::full(2, 2), None)
            .is_err());
    }
}
