use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{contract, mismatch, Result};

/// Dense row-major `f32` tensor.
///
/// `grad` is only allocated for tensors that take part in optimization.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    pub requires_grad: bool,
    grad: Option<Vec<f32>>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f32>) -> Result<Self> {
        let shape = shape.into();
        if shape.contains(&0) {
            return contract("tensor", format!("shape {shape:?} has a zero-length axis"));
        }
        if numel(&shape) != data.len() {
            return contract(
                "tensor",
                format!(
                    "shape {shape:?} needs {} values, got {}",
                    numel(&shape),
                    data.len()
                ),
            );
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f32) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        Tensor::new(shape, vec![value; n]).expect("full: invalid shape")
    }

    pub fn scalar(value: f32) -> Self {
        Tensor::new(vec![1], vec![value]).unwrap()
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> f32) -> Self {
        let shape = shape.into();
        let data = (0..numel(&shape)).map(&mut f).collect();
        Tensor::new(shape, data).expect("from_fn: invalid shape")
    }

    /// Gaussian samples scaled by `std`.
    pub fn randn(shape: impl Into<Vec<usize>>, std: f32, rng: &mut impl Rng) -> Self {
        Self::from_fn(shape, |_| {
            let z: f32 = rng.sample(StandardNormal);
            z * std
        })
    }

    pub fn uniform(shape: impl Into<Vec<usize>>, lo: f32, hi: f32, rng: &mut impl Rng) -> Self {
        Self::from_fn(shape, |_| rng.random_range(lo..hi))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn item(&self) -> f32 {
        self.data[0]
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> &mut [f32] {
        let n = self.data.len();
        self.grad.get_or_insert_with(|| vec![0.0; n])
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != self.data.len() || shape.contains(&0) {
            return mismatch("reshape", &self.shape, &shape);
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}
