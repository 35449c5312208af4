//! Parameter storage and the AdamW optimizer.

use crate::error::{contract, Result, TensorError};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors, in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, mut value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        value.requires_grad = true;
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total scalar count of the parameters whose name starts with `prefix`.
    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Adds the gradients computed by `tape.backward` to each registered parameter.
    pub fn accumulate_grads(&mut self, tape: &Tape) {
        for (id, var) in tape.param_vars() {
            if let Some(g) = tape.grad(var) {
                let dst = self.tensors[id.0].grad_mut();
                dst.iter_mut().zip(g).for_each(|(d, s)| *d += s);
            }
        }
    }

    pub fn grad_norm(&self) -> f32 {
        self.tensors
            .iter()
            .filter_map(Tensor::grad)
            .flat_map(|g| g.iter())
            .map(|g| g * g)
            .sum::<f32>()
            .sqrt()
    }

    /// Rescales all gradients so their global L2 norm is at most `max_norm`. Returns the pre-clip norm.
    pub fn clip_grad_norm(&mut self, max_norm: f32) -> f32 {
        let norm = self.grad_norm();
        if norm > max_norm && norm.is_finite() {
            let s = max_norm / norm;
            for t in &mut self.tensors {
                if t.grad().is_some() {
                    t.grad_mut().iter_mut().for_each(|g| *g *= s);
                }
            }
        }
        norm
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

/// Learning rate used when none is configured.
pub const DEFAULT_LR: f32 = 8e-5;

impl Default for AdamW {
    fn default() -> Self {
        AdamW::new(DEFAULT_LR, (0.9, 0.999), 0.0)
    }
}

impl AdamW {
    pub fn new(lr: f32, betas: (f32, f32), weight_decay: f32) -> Self {
        AdamW {
            lr,
            beta1: betas.0,
            beta2: betas.1,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Vec<f32>], &[Vec<f32>]) {
        (&self.m, &self.v)
    }

    /// Restores saved moment buffers; shapes are validated on the next `step`.
    pub fn restore(&mut self, step: u64, m: Vec<Vec<f32>>, v: Vec<Vec<f32>>) {
        self.step = step;
        self.m = m;
        self.v = v;
    }

    /// Applies one update using the gradients stored on `store`. Parameters without a
    /// gradient are treated as having a zero gradient.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if self.m.is_empty() {
            self.m = store.tensors.iter().map(|t| vec![0.0; t.numel()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != store.len()
            || self
                .m
                .iter()
                .zip(&store.tensors)
                .any(|(m, t)| m.len() != t.numel())
        {
            return contract("adamw", "moment buffers do not match the parameter store");
        }
        if store
            .tensors
            .iter()
            .filter_map(Tensor::grad)
            .any(|g| g.iter().any(|x| !x.is_finite()))
        {
            return Err(TensorError::NonFinite { op: "adamw" });
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let decay = 1.0 - self.lr * self.weight_decay;
        for ((t, m), v) in store.tensors.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grad = t.grad().map(<[f32]>::to_vec);
            let data = t.data_mut();
            for i in 0..data.len() {
                let g = grad.as_ref().map_or(0.0, |g| g[i]);
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                data[i] = data[i] * decay - self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
