//! Flow-matching targets, the masked loss, reference-horizon sampling and latent blending.

use far_tensor::{Tape, Tensor, Var};
use rand::distr::weighted::WeightedIndex;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{contract, Result};

/// One point on the straight path between data and noise.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowSample {
    pub x: Vec<f32>,
    pub eps: Vec<f32>,
    pub t: f32,
    /// `(1 - t) x + t eps`.
    pub z_t: Vec<f32>,
    /// `eps - x`.
    pub u_star: Vec<f32>,
}

impl FlowSample {
    pub fn new(x: Vec<f32>, eps: Vec<f32>, t: f32) -> Result<Self> {
        if x.len() != eps.len() {
            return contract(format!(
                "noise has {} values, data has {}",
                eps.len(),
                x.len()
            ));
        }
        let z_t = x
            .iter()
            .zip(&eps)
            .map(|(x, e)| (1.0 - t) * x + t * e)
            .collect();
        let u_star = x.iter().zip(&eps).map(|(x, e)| e - x).collect();
        Ok(FlowSample {
            x,
            eps,
            t,
            z_t,
            u_star,
        })
    }
}

/// Draws unit Gaussian noise and `t ~ U[0, 1]` for clean latent `x`.
pub fn sample_flow(x: &[f32], rng: &mut impl Rng) -> FlowSample {
    let eps = (0..x.len()).map(|_| StandardNormal.sample(rng)).collect();
    let t = rng.random::<f32>();
    FlowSample::new(x.to_vec(), eps, t).unwrap()
}

/// Mean squared error between `pred` and `target` over the rows selected by `rows`.
pub fn fm_loss(tape: &mut Tape, pred: Var, target: &Tensor, rows: &[bool]) -> Result<Var> {
    let shape = tape.shape(pred).to_vec();
    if shape.len() != 2 || target.shape() != shape.as_slice() || rows.len() != shape[0] {
        return contract(format!(
            "loss inputs disagree: prediction {shape:?}, target {:?}, {} row flags",
            target.shape(),
            rows.len()
        ));
    }
    let idx: Vec<usize> = rows
        .iter()
        .enumerate()
        .filter(|(_, &r)| r)
        .map(|(i, _)| i)
        .collect();
    if idx.is_empty() {
        return contract("loss mask selects no tokens");
    }
    let c = shape[1];
    let picked = tape.gather_rows(pred, &idx)?;
    let mut tgt = Vec::with_capacity(idx.len() * c);
    for &i in &idx {
        tgt.extend_from_slice(&target.data()[i * c..(i + 1) * c]);
    }
    let tgt = tape.constant(Tensor::new(vec![idx.len(), c], tgt)?);
    Ok(tape.mse(picked, tgt)?)
}

/// Default probabilities of conditioning on 0, 1, 2 and 3 frames.
pub const DEFAULT_HORIZON_HEAD: [f32; 4] = [0.05, 0.30, 0.20, 0.15];
/// Default probability mass spread uniformly over the longer horizons.
pub const DEFAULT_HORIZON_TAIL: f32 = 0.30;

/// Categorical distribution over the number of clean reference frames `l in [0, L - 1]`.
#[derive(Clone, Debug)]
pub struct HorizonDist {
    weights: Vec<f32>,
    index: WeightedIndex<f32>,
}

impl HorizonDist {
    /// `head[l]` is the weight of horizon `l`; `tail` is spread evenly over the horizons
    /// after the head. Weights beyond `L - 1` are dropped and the rest renormalised.
    pub fn new(head: &[f32], tail: f32, clip_len: usize) -> Result<Self> {
        if clip_len == 0 {
            return contract("clip length must be at least 1");
        }
        if head
            .iter()
            .chain([&tail])
            .any(|w| !w.is_finite() || *w < 0.0)
        {
            return contract("horizon weights must be finite and non-negative");
        }
        let mut weights: Vec<f32> = (0..clip_len)
            .map(|l| head.get(l).copied().unwrap_or(0.0))
            .collect();
        if clip_len > head.len() {
            let n_tail = (clip_len - head.len()) as f32;
            weights[head.len()..]
                .iter_mut()
                .for_each(|w| *w = tail / n_tail);
        }
        let total: f32 = weights.iter().sum();
        if total <= 0.0 {
            return contract(format!(
                "horizon weights give no mass to lengths below {clip_len}"
            ));
        }
        weights.iter_mut().for_each(|w| *w /= total);
        let index = WeightedIndex::new(&weights)
            .map_err(|e| crate::FarError::Contract(format!("horizon weights: {e}")))?;
        Ok(HorizonDist { weights, index })
    }

    pub fn default_for(clip_len: usize) -> Result<Self> {
        Self::new(&DEFAULT_HORIZON_HEAD, DEFAULT_HORIZON_TAIL, clip_len)
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn sample(&self, rng: &mut impl Rng) -> usize {
        self.index.sample(rng)
    }
}

/// `alpha * x_hat + (1 - alpha) * x_gt`, element-wise.
pub fn blend(x_hat: &Tensor, x_gt: &Tensor, alpha: f32) -> Result<Tensor> {
    if x_hat.shape() != x_gt.shape() {
        return contract(format!(
            "cannot blend shapes {:?} and {:?}",
            x_hat.shape(),
            x_gt.shape()
        ));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return contract(format!("blend weight {alpha} outside [0, 1]"));
    }
    let data = x_hat
        .data()
        .iter()
        .zip(x_gt.data())
        .map(|(h, g)| alpha * h + (1.0 - alpha) * g)
        .collect();
    Ok(Tensor::new(x_hat.shape().to_vec(), data)?)
}

/// Per-step growth of the blend weight unless configured otherwise.
pub const DEFAULT_ALPHA_RATE: f64 = 1e-4;

/// Blend weight schedule: `alpha = min(1, rate * updates)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlendState {
    pub rate: f64,
    pub updates: u64,
}

impl BlendState {
    pub fn new(rate: f64) -> Self {
        BlendState { rate, updates: 0 }
    }

    pub fn alpha(&self) -> f32 {
        // Computed from the count rather than accumulated so that long runs land exactly on 1.
        (self.rate * self.updates as f64).min(1.0) as f32
    }

    pub fn alpha_update(self) -> Self {
        BlendState {
            updates: self.updates + 1,
            ..self
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn flow_endpoints_and_midpoint() {
        let f = FlowSample::new(vec![1.0, -2.0], vec![0.5, 3.0], 0.0).unwrap();
        assert_eq!(f.z_t, f.x);
        assert_eq!(f.u_star, vec![-0.5, 5.0]);
        let f = FlowSample::new(vec![1.0, -2.0], vec![0.5, 3.0], 1.0).unwrap();
        assert_eq!(f.z_t, f.eps);
        let f = FlowSample::new(vec![0.0], vec![2.0], 0.5).unwrap();
        assert_eq!((f.z_t[0], f.u_star[0]), (1.0, 2.0));
    }

    #[test]
    fn sampled_t_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ts: Vec<f32> = (0..4000).map(|_| sample_flow(&[0.0], &mut rng).t).collect();
        assert!(ts.iter().all(|t| (0.0..=1.0).contains(t)));
        let mean = ts.iter().sum::<f32>() / ts.len() as f32;
        // Standard error of the mean of U[0, 1] over 4000 draws is about 0.0046.
        assert!((mean - 0.5).abs() < 0.02, "{mean}");
        let low = ts.iter().filter(|&&t| t < 0.25).count() as f32 / ts.len() as f32;
        assert!((low - 0.25).abs() < 0.03, "{low}");
    }

    fn loss_of(pred: Vec<f32>, target: Vec<f32>, rows: &[bool]) -> Result<f32> {
        let n = rows.len();
        let c = pred.len() / n;
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::new(vec![n, c], pred).unwrap(), true);
        let l = fm_loss(
            &mut tape,
            p,
            &Tensor::new(vec![n, c], target).unwrap(),
            rows,
        )?;
        Ok(tape.value(l).item())
    }

    #[test]
    fn loss_values() {
        assert_eq!(
            loss_of(vec![1.0, 2.0], vec![1.0, 2.0], &[true, true]).unwrap(),
            0.0
        );
        assert_eq!(
            loss_of(
                vec![2.0, 3.0, 4.0, 5.0],
                vec![1.0, 2.0, 3.0, 4.0],
                &[true, true]
            )
            .unwrap(),
            1.0
        );
        // Constant error: masking half the rows leaves the mean unchanged.
        let half = loss_of(vec![3.0; 4], vec![1.0; 4], &[true, false, true, false]).unwrap();
        assert_eq!(half, 4.0);
        // Unselected rows do not contribute even when their error is large.
        assert_eq!(
            loss_of(vec![1.0, 100.0], vec![1.0, 0.0], &[true, false]).unwrap(),
            0.0
        );
    }

    #[test]
    fn empty_mask_is_a_contract_violation() {
        assert!(loss_of(vec![1.0, 2.0], vec![0.0, 0.0], &[false, false]).is_err());
    }

    #[test]
    fn masked_rows_get_exactly_zero_gradient() {
        let mut tape = Tape::new();
        let p = tape.leaf(
            Tensor::new(vec![3, 2], vec![0.3, -1.0, 2.0, 0.5, 1.5, -0.7]).unwrap(),
            true,
        );
        let target = Tensor::zeros(vec![3, 2]);
        let l = fm_loss(&mut tape, p, &target, &[false, true, false]).unwrap();
        tape.backward(l).unwrap();
        let g = tape.grad(p).unwrap();
        assert_eq!(&g[..2], &[0.0, 0.0]);
        assert_eq!(&g[4..], &[0.0, 0.0]);
        // d/dp mean((p - 0)^2) over two values is p.
        assert!((g[2] - 2.0).abs() < 1e-6 && (g[3] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn default_horizon_weights() {
        let h = HorizonDist::default_for(8).unwrap();
        let w = h.weights();
        assert_eq!(w.len(), 8);
        assert!((w.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        assert!((w[1] - 0.30).abs() < 1e-6 && (w[4] - 0.075).abs() < 1e-6);
    }

    #[test]
    fn short_clips_renormalise() {
        let h = HorizonDist::default_for(3).unwrap();
        let w = h.weights();
        let total = 0.05 + 0.30 + 0.20;
        assert!((w[0] - 0.05 / total).abs() < 1e-6);
        assert!((w[2] - 0.20 / total).abs() < 1e-6);
        assert_eq!(HorizonDist::default_for(1).unwrap().weights(), &[1.0]);
        assert!(HorizonDist::new(&[0.0, 1.0], 0.0, 1).is_err());
    }

    #[test]
    fn short_horizons_get_most_mass_empirically() {
        let h = HorizonDist::default_for(16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 10_000;
        let mut counts = [0usize; 16];
        for _ in 0..n {
            counts[h.sample(&mut rng)] += 1;
        }
        let short = (counts[1] + counts[2] + counts[3]) as f64 / n as f64;
        assert!((short - 0.65).abs() < 0.02, "{short}");
        assert!(counts[15] > 0, "the longest horizon is reachable");
    }

    #[test]
    fn blend_endpoints() {
        let a = Tensor::new(vec![2], vec![2.0, -1.0]).unwrap();
        let b = Tensor::new(vec![2], vec![0.0, 3.0]).unwrap();
        assert_eq!(blend(&a, &b, 0.0).unwrap(), b);
        assert_eq!(blend(&a, &b, 1.0).unwrap(), a);
        assert_eq!(blend(&a, &b, 0.5).unwrap().data()[0], 1.0);
        assert!(blend(&a, &Tensor::zeros(vec![3]), 0.5).is_err());
        assert!(blend(&a, &b, 1.5).is_err());
    }

    #[test]
    fn alpha_schedule() {
        let mut s = BlendState::new(DEFAULT_ALPHA_RATE);
        assert_eq!(s.alpha(), 0.0);
        let mut last = 0.0;
        for i in 1..=12_000 {
            s = s.alpha_update();
            assert!(s.alpha() >= last);
            last = s.alpha();
            if i == 5_000 {
                assert!((s.alpha() - 0.5).abs() < 1e-6);
            }
            if i == 10_000 {
                assert_eq!(s.alpha(), 1.0);
            }
        }
        assert_eq!(s.alpha(), 1.0);
    }

    proptest! {
        #[test]
        fn blend_is_elementwise_convex(
            vals in proptest::collection::vec((-10.0f32..10.0, -10.0f32..10.0), 1..32),
            alpha in 0.0f32..=1.0,
        ) {
            let (h, g): (Vec<f32>, Vec<f32>) = vals.into_iter().unzip();
            let n = h.len();
            let out = blend(&Tensor::new(vec![n], h.clone()).unwrap(), &Tensor::new(vec![n], g.clone()).unwrap(), alpha).unwrap();
            for ((o, a), b) in out.data().iter().zip(&h).zip(&g) {
                let (lo, hi) = (a.min(*b), a.max(*b));
                prop_assert!(*o >= lo - 1e-5 && *o <= hi + 1e-5);
            }
        }

        #[test]
        fn alpha_is_monotone_and_capped(rate in 1e-5f64..0.5, steps in 0u64..50_000) {
            let s = BlendState { rate, updates: steps };
            let next = s.alpha_update();
            prop_assert!(next.alpha() >= s.alpha());
            prop_assert!(next.alpha() <= 1.0 && s.alpha() >= 0.0);
        }
    }
}
