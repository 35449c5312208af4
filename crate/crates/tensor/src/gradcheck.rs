//! Central finite-difference oracle for the tape's backward rules.
//!
//! Each check projects the op output onto fixed random weights, so a single
//! scalar loss exercises every output element, then compares the tape's
//! gradient with `(f(x+h) - f(x-h)) / 2h` evaluated element by element on a
//! gradient-free tape.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::AttnMask;
use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const FD_STEP: f32 = 1e-3;
pub const MAX_REL_ERR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct OpCheck {
    pub op: &'static str,
    pub rel_err: f64,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.rel_err < MAX_REL_ERR
    }
}

type Build<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a;

fn projected(tape: &Tape, y: Var, w: &[f32]) -> f64 {
    tape.data(y)
        .iter()
        .zip(w)
        .map(|(&a, &b)| a as f64 * b as f64)
        .sum()
}

/// Largest norm-wise relative error between autodiff and finite-difference gradients
/// over all `inputs`.
pub fn check(build: &Build<'_>, inputs: &[Tensor], step: f32, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let y = build(&mut tape, &vars)?;
    let weights = Tensor::randn(tape.shape(y).to_vec(), 1.0, &mut rng);
    let w = tape.constant(weights.clone());
    let prod = tape.mul(y, w)?;
    let loss = tape.sum(prod)?;
    tape.backward(loss)?;

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut t = Tape::inference();
        let vs: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let y = build(&mut t, &vs)?;
        Ok(projected(&t, y, weights.data()))
    };

    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let auto: Vec<f64> = match tape.grad(*v) {
            Some(g) => g.iter().map(|&x| x as f64).collect(),
            None => vec![0.0; inputs[i].numel()],
        };
        let mut xs = inputs.to_vec();
        let mut num = Vec::with_capacity(auto.len());
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            xs[i].data_mut()[j] = orig + step;
            let fp = eval(&xs)?;
            xs[i].data_mut()[j] = orig - step;
            let fm = eval(&xs)?;
            xs[i].data_mut()[j] = orig;
            num.push((fp - fm) / (2.0 * step as f64));
        }
        let diff: f64 = auto
            .iter()
            .zip(&num)
            .map(|(a, n)| (a - n).powi(2))
            .sum::<f64>()
            .sqrt();
        let scale = auto
            .iter()
            .map(|a| a * a)
            .sum::<f64>()
            .sqrt()
            .max(num.iter().map(|n| n * n).sum::<f64>().sqrt())
            .max(1e-6);
        worst = worst.max(diff / scale);
    }
    Ok(worst)
}

fn lower_triangular(n: usize) -> Vec<bool> {
    (0..n * n).map(|i| i % n <= i / n).collect()
}

/// Runs the oracle on every differentiable op with small random inputs.
pub fn standard_suite() -> Result<Vec<OpCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut r = |shape: &[usize]| Tensor::randn(shape.to_vec(), 1.0, &mut rng);
    let h = FD_STEP;
    let mut out = Vec::new();
    let mut run = |op: &'static str, build: &Build<'_>, inputs: Vec<Tensor>| -> Result<()> {
        let rel_err = check(build, &inputs, h, out.len() as u64)?;
        out.push(OpCheck { op, rel_err });
        Ok(())
    };

    run(
        "add",
        &|t, x| t.add(x[0], x[1]),
        vec![r(&[3, 4]), r(&[3, 4])],
    )?;
    run(
        "sub",
        &|t, x| t.sub(x[0], x[1]),
        vec![r(&[3, 4]), r(&[3, 4])],
    )?;
    run(
        "mul",
        &|t, x| t.mul(x[0], x[1]),
        vec![r(&[3, 4]), r(&[3, 4])],
    )?;
    run("scale", &|t, x| t.scale(x[0], -1.7), vec![r(&[5])])?;
    run(
        "add_bias",
        &|t, x| t.add_bias(x[0], x[1]),
        vec![r(&[3, 4]), r(&[4])],
    )?;
    run(
        "matmul",
        &|t, x| t.matmul(x[0], x[1]),
        vec![r(&[3, 4]), r(&[4, 2])],
    )?;
    run(
        "reshape",
        &|t, x| t.reshape(x[0], &[2, 6]),
        vec![r(&[3, 4])],
    )?;
    run(
        "permute",
        &|t, x| t.permute(x[0], &[2, 0, 1]),
        vec![r(&[2, 3, 4])],
    )?;
    run(
        "concat",
        &|t, x| t.concat(&[x[0], x[1]], 1),
        vec![r(&[2, 2, 3]), r(&[2, 3, 3])],
    )?;
    run("slice", &|t, x| t.slice(x[0], 1, 1, 2), vec![r(&[2, 4, 3])])?;
    run(
        "gather_rows",
        &|t, x| t.gather_rows(x[0], &[2, 0, 2, 1]),
        vec![r(&[3, 4])],
    )?;
    run("silu", &|t, x| t.silu(x[0]), vec![r(&[3, 4])])?;
    run("rms_norm", &|t, x| t.rms_norm(x[0], 1e-6), vec![r(&[3, 5])])?;
    run("softmax", &|t, x| t.softmax(x[0]), vec![r(&[3, 5])])?;
    run(
        "mse",
        &|t, x| t.mse(x[0], x[1]),
        vec![r(&[3, 4]), r(&[3, 4])],
    )?;
    run("sum", &|t, x| t.sum(x[0]), vec![r(&[3, 4])])?;
    let mask = AttnMask::shared(4, 4, lower_triangular(4))?;
    run(
        "attention",
        &|t, x| t.attention(x[0], x[1], x[2], 2, &mask, Some(x[3])),
        vec![r(&[2, 4, 6]), r(&[2, 4, 6]), r(&[2, 4, 6]), r(&[2, 4, 4])],
    )?;
    run(
        "mse(Wx, y)",
        &|t, x| {
            let wx = t.matmul(x[0], x[1])?;
            t.mse(wx, x[2])
        },
        vec![r(&[2, 3]), r(&[3, 2]), r(&[2, 2])],
    )?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_matches_finite_differences() {
        for c in standard_suite().unwrap() {
            assert!(c.passed(), "{} rel err {}", c.op, c.rel_err);
        }
    }
}
