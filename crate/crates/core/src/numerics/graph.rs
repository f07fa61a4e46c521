//! Reverse-mode tape over the primitives the spotting model needs.
//!
//! Every operation appends a node holding its output value; [`Graph::backward`]
//! walks the tape in reverse and leaves each node's gradient in the node's
//! tensor (`Tensor::grad`).

use rand::Rng as _;

use super::kernels::{attention_backward, attention_forward, gemm, softmax_in_place, MatMut, MatRef};
use super::{Rng, Scalar, Tensor};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const BCE_CLAMP: f64 = 1e-7;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Relu(Var),
    LeakyRelu(Var, S),
    Dropout(Var, Vec<S>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<S>,
        inv_std: Vec<S>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<S>,
    },
    SoftmaxRows(Var),
    Column(Var, usize),
    BceMean(Var, Vec<S>),
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op<S>,
}

pub struct Graph<S: Scalar = f32> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims<S: Scalar>(t: &Tensor<S>) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input(&mut self, value: Tensor<S>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    /// Gradient of the last [`backward`](Self::backward) root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.nodes[v.0].value.grad()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<S>> {
        self.nodes[v.0].value.take_grad()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, name: &str) -> Result<Var> {
        value.ensure_finite(name)?;
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = dims(self.value(a));
        let (k2, m) = dims(self.value(b));
        if k != k2 {
            return Err(Error::shape(format!("matmul {n}x{k} by {k2}x{m}")));
        }
        let mut out = vec![S::zero(); n * m];
        gemm(
            S::one(),
            MatRef::new(self.value(a).data(), n, k),
            MatRef::new(self.value(b).data(), k, m),
            S::zero(),
            MatMut::new(&mut out, n, m),
        );
        self.push(Tensor::matrix(n, m, out)?, Op::MatMul(a, b), "matmul")
    }

    /// Adds a length-`m` bias to every row of an `n x m` input.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (n, m) = dims(self.value(x));
        if self.value(b).len() != m {
            return Err(Error::shape(format!(
                "bias of length {} for rows of width {m}",
                self.value(b).len()
            )));
        }
        let bias = self.value(b).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(m) {
            for (o, &bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        self.push(Tensor::matrix(n, m, out)?, Op::AddBias(x, b), "add_bias")
    }

    /// `x W + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_bias(xw, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(format!(
                "add {:?} and {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let out: Vec<S> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::Add(a, b), "add")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let out = t.data().iter().map(|&v| v.max(S::zero())).collect();
        let shape = t.shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::Relu(x), "relu")
    }

    pub fn leaky_relu(&mut self, x: Var, slope: S) -> Result<Var> {
        let t = self.value(x);
        let out = t
            .data()
            .iter()
            .map(|&v| if v >= S::zero() { v } else { v * slope })
            .collect();
        let shape = t.shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::LeakyRelu(x, slope), "leaky_relu")
    }

    /// Inverted dropout. With no RNG (inference) or a zero rate this is the
    /// identity and records nothing.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: Option<&mut Rng>) -> Result<Var> {
        check_dropout_rate(rate)?;
        let Some(rng) = rng else { return Ok(x) };
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = S::from_f64_lossy(1.0 / (1.0 - rate));
        let t = self.value(x);
        let mask: Vec<S> = (0..t.len())
            .map(|_| if rng.gen::<f64>() < rate { S::zero() } else { keep })
            .collect();
        let out = t.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let shape = t.shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::Dropout(x, mask), "dropout")
    }

    /// Row-wise normalization to zero mean and unit variance, then `gain * x + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (n, d) = dims(self.value(x));
        if d < 2 {
            return Err(Error::shape("layer norm needs at least 2 features"));
        }
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(Error::shape("layer norm gain/bias width"));
        }
        let eps = S::from_f64_lossy(LAYER_NORM_EPS);
        let dn = S::from_usize(d).unwrap();
        let mut xhat = self.value(x).data().to_vec();
        let mut inv_std = Vec::with_capacity(n);
        for row in xhat.chunks_mut(d) {
            let mean = row.iter().copied().sum::<S>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / dn;
            let inv = S::one() / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut out = xhat.clone();
        for row in out.chunks_mut(d) {
            for ((o, &gv), &bv) in row.iter_mut().zip(g).zip(b) {
                *o = *o * gv + bv;
            }
        }
        self.push(
            Tensor::matrix(n, d, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            "layer_norm",
        )
    }

    /// Multi-head scaled dot-product attention over projected inputs.
    /// Head `h` uses columns `h*d/heads .. (h+1)*d/heads` of each operand.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (n_q, d_k) = dims(self.value(q));
        let (n_k, d_k2) = dims(self.value(k));
        let (n_v, d_v) = dims(self.value(v));
        if d_k != d_k2 || n_k != n_v {
            return Err(Error::shape(format!(
                "attention q {n_q}x{d_k}, k {n_k}x{d_k2}, v {n_v}x{d_v}"
            )));
        }
        if heads == 0 || d_k % heads != 0 || d_v % heads != 0 {
            return Err(Error::config(format!(
                "width {d_k} not divisible into {heads} heads"
            )));
        }
        let (out, probs) = attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            n_q,
            n_k,
            d_k,
            d_v,
            heads,
        );
        self.push(
            Tensor::matrix(n_q, d_v, out)?,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            "attention",
        )
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (n, m) = dims(self.value(x));
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(m) {
            softmax_in_place(row);
        }
        self.push(Tensor::matrix(n, m, out)?, Op::SoftmaxRows(x), "softmax")
    }

    /// Column `j` of a matrix as a vector.
    pub fn column(&mut self, x: Var, j: usize) -> Result<Var> {
        let (n, m) = dims(self.value(x));
        if j >= m {
            return Err(Error::Bounds { index: j, len: m });
        }
        let out = (0..n).map(|i| self.value(x).get(i, j)).collect();
        self.push(Tensor::vector(out)?, Op::Column(x, j), "column")
    }

    /// Mean binary cross-entropy of probabilities against 0/1 labels, with
    /// probabilities clamped to `[1e-7, 1 - 1e-7]`.
    pub fn bce_mean(&mut self, p: Var, labels: &[S]) -> Result<Var> {
        let probs = self.value(p).data();
        if probs.len() != labels.len() {
            return Err(Error::shape(format!(
                "{} probabilities for {} labels",
                probs.len(),
                labels.len()
            )));
        }
        let loss = bce_value(probs, labels);
        self.push(
            Tensor::vector(vec![loss])?,
            Op::BceMean(p, labels.to_vec()),
            "bce",
        )
    }

    /// Hash of the sign pattern at every ReLU / LeakyReLU input and every
    /// clamped BCE probability. Two evaluations with equal signatures lie on
    /// the same smooth piece of a piecewise-smooth function.
    pub fn kink_signature(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        let lo = S::from_f64_lossy(BCE_CLAMP);
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => self.value(*x).data().iter().for_each(|&v| (v > S::zero()).hash(&mut h)),
                Op::LeakyRelu(x, _) => self.value(*x).data().iter().for_each(|&v| (v >= S::zero()).hash(&mut h)),
                Op::BceMean(p, _) => self
                    .value(*p)
                    .data()
                    .iter()
                    .for_each(|&v| (v < lo, v > S::one() - lo).hash(&mut h)),
                _ => {}
            }
        }
        h.finish()
    }

    /// Back-propagates from a single-element `root`, replacing any previous gradients.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::shape("backward root must be a scalar"));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(vec![S::one()]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads.into_iter().chain(std::iter::repeat_with(|| None))) {
            node.value.take_grad();
            if let Some(g) = g {
                node.value.set_grad(g)?;
            }
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (n, k) = dims(self.value(*a));
                let m = self.value(*b).cols();
                let mut da = vec![S::zero(); n * k];
                gemm(
                    S::one(),
                    MatRef::new(g, n, m),
                    MatRef::new(self.value(*b).data(), k, m).t(),
                    S::zero(),
                    MatMut::new(&mut da, n, k),
                );
                accumulate(grads, *a, da);
                let mut db = vec![S::zero(); k * m];
                gemm(
                    S::one(),
                    MatRef::new(self.value(*a).data(), n, k).t(),
                    MatRef::new(g, n, m),
                    S::zero(),
                    MatMut::new(&mut db, k, m),
                );
                accumulate(grads, *b, db);
            }
            Op::AddBias(x, b) => {
                let m = self.value(*b).len();
                let mut db = vec![S::zero(); m];
                for row in g.chunks(m) {
                    for (d, &gv) in db.iter_mut().zip(row) {
                        *d += gv;
                    }
                }
                accumulate(grads, *x, g.to_vec());
                accumulate(grads, *b, db);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.to_vec());
                accumulate(grads, *b, g.to_vec());
            }
            Op::Relu(x) => {
                let dx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > S::zero() { gv } else { S::zero() })
                    .collect();
                accumulate(grads, *x, dx);
            }
            Op::LeakyRelu(x, slope) => {
                let dx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v >= S::zero() { gv } else { gv * *slope })
                    .collect();
                accumulate(grads, *x, dx);
            }
            Op::Dropout(x, mask) => {
                let dx = g.iter().zip(mask).map(|(&gv, &m)| gv * m).collect();
                accumulate(grads, *x, dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = self.value(*gain).len();
                let dn = S::from_usize(d).unwrap();
                let gv = self.value(*gain).data();
                let mut dgain = vec![S::zero(); d];
                let mut dbias = vec![S::zero(); d];
                let mut dx = vec![S::zero(); g.len()];
                let mut dxhat = vec![S::zero(); d];
                for (r, ((grow, xrow), dxrow)) in g
                    .chunks(d)
                    .zip(xhat.chunks(d))
                    .zip(dx.chunks_mut(d))
                    .enumerate()
                {
                    let mut sum_dxhat = S::zero();
                    let mut sum_dxhat_xhat = S::zero();
                    for j in 0..d {
                        dgain[j] += grow[j] * xrow[j];
                        dbias[j] += grow[j];
                        dxhat[j] = grow[j] * gv[j];
                        sum_dxhat += dxhat[j];
                        sum_dxhat_xhat += dxhat[j] * xrow[j];
                    }
                    let scale = inv_std[r] / dn;
                    for j in 0..d {
                        dxrow[j] = scale * (dn * dxhat[j] - sum_dxhat - xrow[j] * sum_dxhat_xhat);
                    }
                }
                accumulate(grads, *x, dx);
                accumulate(grads, *gain, dgain);
                accumulate(grads, *bias, dbias);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (n_q, d_k) = dims(self.value(*q));
                let n_k = self.value(*k).rows();
                let d_v = self.value(*v).cols();
                let (dq, dk, dv) = attention_backward(
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    probs,
                    g,
                    n_q,
                    n_k,
                    d_k,
                    d_v,
                    *heads,
                );
                accumulate(grads, *q, dq);
                accumulate(grads, *k, dk);
                accumulate(grads, *v, dv);
            }
            Op::SoftmaxRows(x) => {
                let m = node.value.cols();
                let mut dx = vec![S::zero(); g.len()];
                for ((drow, grow), yrow) in dx
                    .chunks_mut(m)
                    .zip(g.chunks(m))
                    .zip(node.value.data().chunks(m))
                {
                    let dot: S = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    for j in 0..m {
                        drow[j] = yrow[j] * (grow[j] - dot);
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Column(x, j) => {
                let m = self.value(*x).cols();
                let mut dx = vec![S::zero(); self.value(*x).len()];
                for (r, &gv) in g.iter().enumerate() {
                    dx[r * m + j] = gv;
                }
                accumulate(grads, *x, dx);
            }
            Op::BceMean(p, labels) => {
                let lo = S::from_f64_lossy(BCE_CLAMP);
                let hi = S::one() - lo;
                let n = S::from_usize(labels.len()).unwrap();
                let dp = self
                    .value(*p)
                    .data()
                    .iter()
                    .zip(labels)
                    .map(|(&pv, &y)| {
                        if pv < lo || pv > hi {
                            S::zero()
                        } else {
                            g[0] * (-y / pv + (S::one() - y) / (S::one() - pv)) / n
                        }
                    })
                    .collect();
                accumulate(grads, *p, dp);
            }
        }
    }
}

fn accumulate<S: Scalar>(grads: &mut [Option<Vec<S>>], v: Var, contribution: Vec<S>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contribution) {
                *e += c;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
}

pub(crate) fn check_dropout_rate(rate: f64) -> Result<()> {
    if (0.0..1.0).contains(&rate) {
        Ok(())
    } else {
        Err(Error::config(format!("dropout rate {rate} outside [0, 1)")))
    }
}

/// Clamped mean binary cross-entropy.
pub(crate) fn bce_value<S: Scalar>(probs: &[S], labels: &[S]) -> S {
    let lo = S::from_f64_lossy(BCE_CLAMP);
    let hi = S::one() - lo;
    let n = S::from_usize(labels.len().max(1)).unwrap();
    probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.max(lo).min(hi);
            -(y * p.ln() + (S::one() - y) * (S::one() - p).ln())
        })
        .sum::<S>()
        / n
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_requires_scalar_root() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros(&[2, 2]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn shared_input_accumulates() {
        // y = sum(x + x) via bce-free path: column of (x + x) then matmul with ones.
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let s = g.add(x, x).unwrap();
        let ones = g.input(Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap());
        let y = g.matmul(s, ones).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn shape_errors_are_reported() {
        let mut g = Graph::<f32>::new();
        let a = g.input(Tensor::zeros(&[2, 3]));
        let b = g.input(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.matmul(a, b), Err(Error::Shape(_))));
        let bias = g.input(Tensor::zeros(&[2]));
        assert!(matches!(g.add_bias(a, bias), Err(Error::Shape(_))));
    }

    #[test]
    fn non_finite_outputs_are_rejected() {
        let mut g = Graph::<f32>::new();
        let a = g.input(Tensor::filled(&[1, 1], f32::MAX));
        assert!(matches!(g.add(a, a), Err(Error::NumericInput(_))));
    }

    #[test]
    fn dropout_rate_validation() {
        let mut g = Graph::<f32>::new();
        let a = g.input(Tensor::zeros(&[1, 1]));
        assert!(matches!(g.dropout(a, 1.0, None), Err(Error::Config(_))));
        assert_eq!(g.dropout(a, 0.5, None).unwrap(), a);
    }
}
