//! Wengert-list tape: every forward op appends a node holding its value and
//! enough saved state to run its vector-Jacobian product in reverse.
//!
//! A tape is built fresh for each forward pass. With gradients disabled the
//! same op set runs as a plain evaluator and records no backward rules.

use std::collections::HashMap;

use crate::attention::{self, AttentionSaved, AttnMask};
use crate::error::{contract, mismatch, Result, TensorError};
use crate::kernels::{gemm, matmul, MatRef};
use crate::optim::{ParamId, ParamStore};
use crate::tensor::{numel, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    AddBias(Var, Var),
    MatMul(Var, Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Slice { x: Var, axis: usize, start: usize },
    Gather { table: Var, indices: Vec<usize> },
    Silu(Var),
    RmsNorm { x: Var, inv_rms: Vec<f32> },
    Softmax(Var),
    Mse(Var, Var),
    Sum(Var),
    Attention(Box<AttentionSaved>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
    grad_enabled: bool,
    params: HashMap<ParamId, Var>,
    attention_flops: u64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Returns `x` with its axes reordered so that output axis `i` is input axis `axes[i]`.
fn permute_data(data: &[f32], shape: &[usize], axes: &[usize]) -> (Vec<f32>, Vec<usize>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let rank = shape.len();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    let inner = out_shape[rank - 1];
    let inner_stride = src_strides[rank - 1];
    while out.len() < n {
        let mut s = src;
        for _ in 0..inner {
            out.push(data[s]);
            s += inner_stride;
        }
        // advance the outer multi-index (all axes but the last)
        let mut ax = rank - 1;
        loop {
            if ax == 0 {
                break;
            }
            ax -= 1;
            idx[ax] += 1;
            src += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out, out_shape)
}

fn invert_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    (numel(&shape[..axis]), numel(&shape[axis + 1..]))
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            grad_enabled: true,
            params: HashMap::new(),
            attention_flops: 0,
        }
    }

    /// A tape that evaluates ops without recording backward rules.
    pub fn inference() -> Self {
        Tape {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-add count of every attention op evaluated on this tape (x2 for FLOPs).
    pub fn attention_flops(&self) -> u64 {
        self.attention_flops
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f32] {
        self.nodes[v.0].value.data()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to `v`, if it was reached.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Tensor, op: Op, wants_grad: bool, name: &'static str) -> Result<Var> {
        check_finite(name, &value)?;
        let requires_grad = self.grad_enabled && wants_grad;
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && self.grad_enabled;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Registers a trainable parameter once per tape; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.leaf(store.get(id).clone(), true);
        self.params.insert(id, v);
        v
    }

    pub(crate) fn param_vars(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.params.iter().map(|(&id, &v)| (id, v))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return mismatch(op, self.shape(a), self.shape(b));
        }
        Ok(())
    }

    fn zip(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f32, f32) -> f32,
    ) -> Result<Tensor> {
        self.same_shape(op, a, b)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a).to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Add(a, b), rg, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Sub(a, b), rg, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Mul(a, b), rg, "mul")
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Result<Var> {
        let data = self.data(a).iter().map(|&x| x * s).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, s), rg, "scale")
    }

    /// Adds a `[n]` vector to every row of `x` whose last axis is `n`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap();
        if self.shape(b) != [n] {
            return mismatch("add_bias", self.shape(x), self.shape(b));
        }
        let bias = self.data(b);
        let data = self
            .data(x)
            .chunks(n)
            .flat_map(|row| row.iter().zip(bias).map(|(a, c)| a + c))
            .collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(x) || self.rg(b);
        self.push(t, Op::AddBias(x, b), rg, "add_bias")
    }

    /// 2-D matrix product `[m,k] @ [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return mismatch("matmul", sa, sb);
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul(self.data(a), self.data(b), m, k, n);
        let t = Tensor::new(vec![m, n], data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::MatMul(a, b), rg, "matmul")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone();
        let t = t.reshape(shape.to_vec())?;
        let rg = self.rg(x);
        self.push(t, Op::Reshape(x), rg, "reshape")
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len()
            || axes
                .iter()
                .any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true))
        {
            return contract(
                "permute",
                format!("axes {axes:?} are not a permutation for shape {shape:?}"),
            );
        }
        let (data, out_shape) = permute_data(self.data(x), &shape, axes);
        let t = Tensor::new(out_shape, data)?;
        let rg = self.rg(x);
        self.push(t, Op::Permute(x, axes.to_vec()), rg, "permute")
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        if xs.is_empty() {
            return contract("concat", "no inputs");
        }
        let first = self.shape(xs[0]).to_vec();
        if axis >= first.len() {
            return contract("concat", format!("axis {axis} out of range for {first:?}"));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let ok = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return mismatch("concat", &first, s);
            }
            total += s[axis];
        }
        let (outer, inner) = outer_inner(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let len = self.shape(x)[axis] * inner;
                data.extend_from_slice(&self.data(x)[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let t = Tensor::new(shape, data)?;
        let rg = xs.iter().any(|&x| self.rg(x));
        self.push(t, Op::Concat(xs.to_vec(), axis), rg, "concat")
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return contract(
                "slice",
                format!("[{start}, {}) on axis {axis} of {shape:?}", start + len),
            );
        }
        let (outer, inner) = outer_inner(&shape, axis);
        let src = self.data(x);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let t = Tensor::new(out_shape, data)?;
        let rg = self.rg(x);
        self.push(t, Op::Slice { x, axis, start }, rg, "slice")
    }

    /// Embedding lookup: rows of a `[r, d]` table.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let s = self.shape(table);
        if s.len() != 2 {
            return contract("gather_rows", format!("table must be 2-D, got {s:?}"));
        }
        let (r, d) = (s[0], s[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= r) {
            return contract(
                "gather_rows",
                format!("index {bad} out of range for {r} rows"),
            );
        }
        let src = self.data(table);
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let t = Tensor::new(vec![indices.len(), d], data)?;
        let rg = self.rg(table);
        self.push(
            t,
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
            rg,
            "gather_rows",
        )
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let data = self
            .data(x)
            .iter()
            .map(|&v| v / (1.0 + (-v).exp()))
            .collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(x);
        self.push(t, Op::Silu(x), rg, "silu")
    }

    /// Scale-free RMS normalization over the last axis.
    pub fn rms_norm(&mut self, x: Var, eps: f32) -> Result<Var> {
        let n = *self.shape(x).last().unwrap();
        let src = self.data(x);
        let mut inv_rms = Vec::with_capacity(src.len() / n);
        let mut data = Vec::with_capacity(src.len());
        for row in src.chunks(n) {
            let ms = row.iter().map(|v| v * v).sum::<f32>() / n as f32;
            let r = 1.0 / (ms + eps).sqrt();
            inv_rms.push(r);
            data.extend(row.iter().map(|v| v * r));
        }
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(x);
        self.push(t, Op::RmsNorm { x, inv_rms }, rg, "rms_norm")
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap();
        let mut data = self.data(x).to_vec();
        data.chunks_mut(n).for_each(attention::softmax_row);
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(x);
        self.push(t, Op::Softmax(x), rg, "softmax")
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let n = self.value(a).numel() as f32;
        let s: f32 = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::scalar(s / n), Op::Mse(a, b), rg, "mse")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f32 = self.data(x).iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg, "sum")
    }

    /// Multi-head masked attention over `groups` independent sequences.
    ///
    /// `q` is `[g, lq, d]`, `k` and `v` are `[g, lk, d]`; heads split `d` evenly.
    /// `bias`, when given, is an additive `[heads, lq, lk]` score offset shared by all groups.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: &AttnMask,
        bias: Option<Var>,
    ) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q), self.shape(k), self.shape(v));
        if sq.len() != 3 || sk.len() != 3 || sk != sv || sq[0] != sk[0] || sq[2] != sk[2] {
            return mismatch("attention", sq, sk);
        }
        let (g, lq, lk, d) = (sq[0], sq[1], sk[1], sq[2]);
        if heads == 0 || d % heads != 0 {
            return contract(
                "attention",
                format!("head count {heads} does not divide width {d}"),
            );
        }
        mask.check(g, lq, lk)?;
        if let Some(b) = bias {
            let want = [heads, lq, lk];
            if self.shape(b) != want {
                return mismatch("attention bias", self.shape(b), &want);
            }
        }
        let bias_data = bias.map(|b| self.data(b));
        let (out, probs) = attention::forward(
            self.data(q),
            self.data(k),
            self.data(v),
            bias_data,
            mask,
            attention::Dims {
                g,
                lq,
                lk,
                d,
                heads,
            },
        );
        self.attention_flops += 2 * (g * lq * lk * d) as u64;
        let t = Tensor::new(vec![g, lq, d], out)?;
        let rg = self.rg(q) || self.rg(k) || self.rg(v) || bias.is_some_and(|b| self.rg(b));
        let saved = AttentionSaved {
            q,
            k,
            v,
            bias,
            probs: if rg && self.grad_enabled {
                probs
            } else {
                Vec::new()
            },
            dims: attention::Dims {
                g,
                lq,
                lk,
                d,
                heads,
            },
        };
        self.push(t, Op::Attention(Box::new(saved)), rg, "attention")
    }

    /// Reverse sweep from a scalar `loss`, populating gradients for every node that requires one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return contract("backward", "tape is empty");
        }
        if self.value(loss).numel() != 1 {
            return contract(
                "backward",
                format!("loss must be a scalar, got shape {:?}", self.shape(loss)),
            );
        }
        let Tape { nodes, grads, .. } = self;
        grads.clear();
        grads.resize(nodes.len(), None);
        if !nodes[loss.0].requires_grad {
            return Ok(());
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !matches!(nodes[i].op, Op::Leaf) {
                backprop(nodes, grads, i, &g);
            }
            grads[i] = Some(g);
        }
        Ok(())
    }
}

fn acc(grads: &mut [Option<Vec<f32>>], nodes: &[Node], v: Var, delta: impl FnOnce(&mut [f32])) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let n = nodes[v.0].value.numel();
    let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
    delta(slot);
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn backprop(nodes: &[Node], grads: &mut [Option<Vec<f32>>], i: usize, g: &[f32]) {
    let val = |v: Var| nodes[v.0].value.data();
    let shape = |v: Var| nodes[v.0].value.shape();
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            acc(grads, nodes, *a, |d| add_into(d, g));
            acc(grads, nodes, *b, |d| add_into(d, g));
        }
        Op::Sub(a, b) => {
            acc(grads, nodes, *a, |d| add_into(d, g));
            acc(grads, nodes, *b, |d| {
                d.iter_mut().zip(g).for_each(|(d, s)| *d -= s)
            });
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            acc(grads, nodes, *a, |d| {
                d.iter_mut()
                    .zip(g.iter().zip(bv))
                    .for_each(|(d, (g, b))| *d += g * b)
            });
            acc(grads, nodes, *b, |d| {
                d.iter_mut()
                    .zip(g.iter().zip(av))
                    .for_each(|(d, (g, a))| *d += g * a)
            });
        }
        Op::Scale(a, s) => acc(grads, nodes, *a, |d| {
            d.iter_mut().zip(g).for_each(|(d, g)| *d += g * s)
        }),
        Op::AddBias(x, b) => {
            acc(grads, nodes, *x, |d| add_into(d, g));
            let n = shape(*b)[0];
            acc(grads, nodes, *b, |d| {
                for row in g.chunks(n) {
                    add_into(d, row);
                }
            });
        }
        Op::MatMul(a, b) => {
            let (m, k) = (shape(*a)[0], shape(*a)[1]);
            let n = shape(*b)[1];
            let gm = MatRef::row_major(g, m, n);
            let (av, bv) = (val(*a), val(*b));
            acc(grads, nodes, *a, |d| {
                gemm(1.0, gm, MatRef::row_major(bv, k, n).t(), 1.0, d, k, 1)
            });
            acc(grads, nodes, *b, |d| {
                gemm(1.0, MatRef::row_major(av, m, k).t(), gm, 1.0, d, n, 1)
            });
        }
        Op::Reshape(x) => acc(grads, nodes, *x, |d| add_into(d, g)),
        Op::Permute(x, axes) => {
            let out_shape = nodes[i].value.shape();
            let (back, _) = permute_data(g, out_shape, &invert_axes(axes));
            acc(grads, nodes, *x, |d| add_into(d, &back));
        }
        Op::Concat(xs, axis) => {
            let out_shape = nodes[i].value.shape();
            let (outer, inner) = outer_inner(out_shape, *axis);
            let total = out_shape[*axis];
            let mut offset = 0;
            for &x in xs {
                let len = shape(x)[*axis];
                acc(grads, nodes, x, |d| {
                    for o in 0..outer {
                        let src =
                            &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                        add_into(&mut d[o * len * inner..(o + 1) * len * inner], src);
                    }
                });
                offset += len;
            }
        }
        Op::Slice { x, axis, start } => {
            let in_shape = shape(*x);
            let len = nodes[i].value.shape()[*axis];
            let (outer, inner) = outer_inner(in_shape, *axis);
            let full = in_shape[*axis];
            acc(grads, nodes, *x, |d| {
                for o in 0..outer {
                    let dst = &mut d[(o * full + start) * inner..(o * full + start + len) * inner];
                    add_into(dst, &g[o * len * inner..(o + 1) * len * inner]);
                }
            });
        }
        Op::Gather { table, indices } => {
            let dim = shape(*table)[1];
            acc(grads, nodes, *table, |d| {
                for (row, &idx) in indices.iter().enumerate() {
                    add_into(
                        &mut d[idx * dim..(idx + 1) * dim],
                        &g[row * dim..(row + 1) * dim],
                    );
                }
            });
        }
        Op::Silu(x) => {
            let xv = val(*x);
            acc(grads, nodes, *x, |d| {
                for ((d, &g), &x) in d.iter_mut().zip(g).zip(xv) {
                    let s = 1.0 / (1.0 + (-x).exp());
                    *d += g * s * (1.0 + x * (1.0 - s));
                }
            });
        }
        Op::RmsNorm { x, inv_rms } => {
            let xv = val(*x);
            let n = *shape(*x).last().unwrap();
            acc(grads, nodes, *x, |d| {
                for (r, ((drow, grow), xrow)) in d
                    .chunks_mut(n)
                    .zip(g.chunks(n))
                    .zip(xv.chunks(n))
                    .enumerate()
                {
                    let r = inv_rms[r];
                    let dot: f32 = grow.iter().zip(xrow).map(|(g, x)| g * x).sum();
                    let c = r * r * r * dot / n as f32;
                    for ((d, g), x) in drow.iter_mut().zip(grow).zip(xrow) {
                        *d += r * g - c * x;
                    }
                }
            });
        }
        Op::Softmax(x) => {
            let y = nodes[i].value.data();
            let n = *shape(*x).last().unwrap();
            acc(grads, nodes, *x, |d| {
                for ((drow, grow), yrow) in d.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                    let dot: f32 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                    for ((d, g), y) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d += y * (g - dot);
                    }
                }
            });
        }
        Op::Mse(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let c = 2.0 * g[0] / av.len() as f32;
            acc(grads, nodes, *a, |d| {
                for ((d, x), y) in d.iter_mut().zip(av).zip(bv) {
                    *d += c * (x - y);
                }
            });
            acc(grads, nodes, *b, |d| {
                for ((d, x), y) in d.iter_mut().zip(av).zip(bv) {
                    *d -= c * (x - y);
                }
            });
        }
        Op::Sum(x) => acc(grads, nodes, *x, |d| d.iter_mut().for_each(|d| *d += g[0])),
        Op::Attention(saved) => {
            let s = saved.as_ref();
            let grads_out = attention::backward(
                val(s.q),
                val(s.k),
                val(s.v),
                &s.probs,
                g,
                s.dims,
                s.bias.is_some_and(|b| nodes[b.0].requires_grad),
            );
            acc(grads, nodes, s.q, |d| add_into(d, &grads_out.dq));
            acc(grads, nodes, s.k, |d| add_into(d, &grads_out.dk));
            acc(grads, nodes, s.v, |d| add_into(d, &grads_out.dv));
            if let (Some(b), Some(db)) = (s.bias, grads_out.dbias.as_deref()) {
                acc(grads, nodes, b, |d| add_into(d, db));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let i = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let a = tape.constant(t(&[2, 2], &[3.0, -1.0, 0.5, 7.0]));
        let y = tape.matmul(i, a).unwrap();
        assert_eq!(tape.data(y), &[3.0, -1.0, 0.5, 7.0]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[0.0, 0.0]));
        let y = tape.softmax(x).unwrap();
        assert_eq!(tape.data(y), &[0.5, 0.5]);
    }

    #[test]
    fn mse_of_identical_inputs_is_zero() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2], &[1.0, 2.0]));
        let y = tape.mse(a, b).unwrap();
        assert_eq!(tape.value(y).item(), 0.0);
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]), true);
        let c = tape.constant(t(&[3], &[4.0, 5.0, 6.0]));
        let _unused = tape.scale(x, 2.0).unwrap();
        let loss = tape.sum(c).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(x).is_none_or(|g| g.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let err = tape.backward(x).unwrap_err();
        assert!(matches!(err, TensorError::Contract { op: "backward", .. }));
    }

    #[test]
    fn empty_tape_backward_is_rejected() {
        let mut tape = Tape::new();
        let mut other = Tape::new();
        let x = other.leaf(Tensor::scalar(1.0), true);
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![3, 2]));
        let msg = tape.add(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
    }

    #[test]
    fn non_finite_output_names_op() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[1], &[f32::MAX]));
        let err = tape.scale(a, 10.0).unwrap_err();
        assert_eq!(err, TensorError::NonFinite { op: "scale" });
    }

    #[test]
    fn permute_round_trip() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(vec![2, 3, 4], |i| i as f32));
        let p = tape.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(tape.shape(p), &[4, 2, 3]);
        // element [k, i, j] of p equals x[i, j, k]
        assert_eq!(
            tape.data(p)[(3 * 2 + 1) * 3 + 2],
            tape.data(x)[(3 + 2) * 4 + 3]
        );
        let back = tape.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(tape.data(back), tape.data(x));
    }

    #[test]
    fn concat_then_slice_recovers_parts() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_fn(vec![2, 2], |i| i as f32));
        let b = tape.constant(Tensor::from_fn(vec![2, 3], |i| 10.0 + i as f32));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.shape(c), &[2, 5]);
        let s = tape.slice(c, 1, 2, 3).unwrap();
        assert_eq!(tape.data(s), tape.data(b));
    }

    #[test]
    fn inference_tape_records_no_gradients() {
        let mut tape = Tape::inference();
        let x = tape.leaf(Tensor::scalar(2.0), true);
        let y = tape.mul(x, x).unwrap();
        assert!(!tape.requires_grad(y));
        tape.backward(y).unwrap();
        assert!(tape.grad(x).is_none());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn values(n: usize) -> impl Strategy<Value = Vec<f32>> {
            prop::collection::vec(-20.0f32..20.0, n)
        }

        proptest! {
            #[test]
            fn softmax_rows_are_distributions(rows in 1usize..5, cols in 1usize..7, seed in any::<u64>()) {
                let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
                let mut tape = Tape::new();
                let x = tape.constant(Tensor::randn(vec![rows, cols], 8.0, &mut rng));
                let y = tape.softmax(x).unwrap();
                for row in tape.data(y).chunks(cols) {
                    prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
                    prop_assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
                }
            }

            #[test]
            fn permute_then_inverse_is_identity(data in values(24), which in 0usize..6) {
                let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
                let axes = perms[which];
                let mut inverse = [0; 3];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let mut tape = Tape::new();
                let x = tape.constant(t(&[2, 3, 4], &data));
                let y = tape.permute(x, &axes).unwrap();
                let z = tape.permute(y, &inverse).unwrap();
                prop_assert_eq!(tape.data(z), &data[..]);
            }

            #[test]
            fn gradient_of_dot_product_is_the_other_factor(a in values(6), b in values(6)) {
                let mut tape = Tape::new();
                let x = tape.leaf(t(&[2, 3], &a), true);
                let y = tape.constant(t(&[2, 3], &b));
                let p = tape.mul(x, y).unwrap();
                let s = tape.sum(p).unwrap();
                tape.backward(s).unwrap();
                prop_assert_eq!(tape.grad(x).unwrap(), &b[..]);
            }
        }
    }
}
