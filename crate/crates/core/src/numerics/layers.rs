//! Transformer building blocks, both as tape compositions (used by the model)
//! and as plain functions over tensors.

use rand::Rng as _;

use super::graph::{check_dropout_rate, Graph, Var};
use super::kernels::softmax_in_place;
use super::{Rng, RngState, Scalar, Tensor};
use crate::error::{Error, Result};

pub const LEAKY_SLOPE: f64 = 0.01;

/// Fused projections of one attention sublayer. Weights are `d x d`,
/// applied as `x W + b`.
#[derive(Debug, Clone)]
pub struct AttentionParams<S: Scalar = f32> {
    pub wq: Tensor<S>,
    pub bq: Tensor<S>,
    pub wk: Tensor<S>,
    pub bk: Tensor<S>,
    pub wv: Tensor<S>,
    pub bv: Tensor<S>,
    pub wo: Tensor<S>,
    pub bo: Tensor<S>,
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

impl<S: Scalar> AttentionParams<S> {
    pub fn on_graph(&self, g: &mut Graph<S>) -> AttentionVars {
        AttentionVars {
            wq: g.input(self.wq.clone()),
            bq: g.input(self.bq.clone()),
            wk: g.input(self.wk.clone()),
            bk: g.input(self.bk.clone()),
            wv: g.input(self.wv.clone()),
            bv: g.input(self.bv.clone()),
            wo: g.input(self.wo.clone()),
            bo: g.input(self.bo.clone()),
        }
    }
}

/// Two linear layers with a ReLU between them: `d -> d_ff -> d`.
#[derive(Debug, Clone)]
pub struct FeedForwardParams<S: Scalar = f32> {
    pub w1: Tensor<S>,
    pub b1: Tensor<S>,
    pub w2: Tensor<S>,
    pub b2: Tensor<S>,
}

#[derive(Debug, Clone, Copy)]
pub struct FeedForwardVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl<S: Scalar> FeedForwardParams<S> {
    pub fn on_graph(&self, g: &mut Graph<S>) -> FeedForwardVars {
        FeedForwardVars {
            w1: g.input(self.w1.clone()),
            b1: g.input(self.b1.clone()),
            w2: g.input(self.w2.clone()),
            b2: g.input(self.b2.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct NormVars {
    pub gain: Var,
    pub bias: Var,
}

pub fn mha_on_graph<S: Scalar>(
    g: &mut Graph<S>,
    x_q: Var,
    x_kv: Var,
    p: &AttentionVars,
    heads: usize,
) -> Result<Var> {
    let d = g.value(x_q).cols();
    if heads == 0 || d % heads != 0 {
        return Err(Error::config(format!("model width {d} not divisible by {heads} heads")));
    }
    let q = g.linear(x_q, p.wq, p.bq)?;
    let k = g.linear(x_kv, p.wk, p.bk)?;
    let v = g.linear(x_kv, p.wv, p.bv)?;
    let a = g.attention(q, k, v, heads)?;
    g.linear(a, p.wo, p.bo)
}

pub fn feed_forward_on_graph<S: Scalar>(g: &mut Graph<S>, x: Var, p: &FeedForwardVars) -> Result<Var> {
    let h = g.linear(x, p.w1, p.b1)?;
    let h = g.relu(h)?;
    g.linear(h, p.w2, p.b2)
}

/// Post-norm residual block: `norm(x + dropout(sublayer_out))`.
pub fn residual_norm<S: Scalar>(
    g: &mut Graph<S>,
    x: Var,
    sublayer_out: Var,
    norm: &NormVars,
    dropout: f64,
    rng: Option<&mut Rng>,
) -> Result<Var> {
    let dropped = g.dropout(sublayer_out, dropout, rng)?;
    let sum = g.add(x, dropped)?;
    g.layer_norm(sum, norm.gain, norm.bias)
}

/// Stable softmax of a vector.
pub fn softmax<S: Scalar>(v: &[S]) -> Result<Vec<S>> {
    if v.is_empty() {
        return Err(Error::shape("softmax of an empty vector"));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NumericInput("softmax input".into()));
    }
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

/// `softmax(Q K^T / sqrt(d_k)) V` for a single head.
pub fn scaled_dot_attention<S: Scalar>(q: &Tensor<S>, k: &Tensor<S>, v: &Tensor<S>) -> Result<Tensor<S>> {
    let mut g = Graph::new();
    let (q, k, v) = (g.input(q.clone()), g.input(k.clone()), g.input(v.clone()));
    let out = g.attention(q, k, v, 1)?;
    Ok(g.value(out).clone())
}

pub fn multi_head_attention<S: Scalar>(
    x_q: &Tensor<S>,
    x_kv: &Tensor<S>,
    params: &AttentionParams<S>,
    heads: usize,
) -> Result<Tensor<S>> {
    let mut g = Graph::new();
    let p = params.on_graph(&mut g);
    let (xq, xkv) = (g.input(x_q.clone()), g.input(x_kv.clone()));
    let out = mha_on_graph(&mut g, xq, xkv, &p, heads)?;
    Ok(g.value(out).clone())
}

pub fn feed_forward<S: Scalar>(x: &Tensor<S>, params: &FeedForwardParams<S>) -> Result<Tensor<S>> {
    let mut g = Graph::new();
    let p = params.on_graph(&mut g);
    let xv = g.input(x.clone());
    let out = feed_forward_on_graph(&mut g, xv, &p)?;
    Ok(g.value(out).clone())
}

pub fn layer_norm<S: Scalar>(x: &Tensor<S>, gain: &Tensor<S>, bias: &Tensor<S>) -> Result<Tensor<S>> {
    let mut g = Graph::new();
    let (xv, gv, bv) = (g.input(x.clone()), g.input(gain.clone()), g.input(bias.clone()));
    let out = g.layer_norm(xv, gv, bv)?;
    Ok(g.value(out).clone())
}

pub fn leaky_relu<S: Scalar>(x: &Tensor<S>, slope: S) -> Tensor<S> {
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let out = g.leaky_relu(xv, slope).expect("leaky relu preserves finiteness");
    g.value(out).clone()
}

pub fn dropout<S: Scalar>(x: &Tensor<S>, rate: f64, rng: &RngState, training: bool) -> Result<Tensor<S>> {
    check_dropout_rate(rate)?;
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let mut r = rng.rng();
    let out = g.dropout(xv, rate, training.then_some(&mut r))?;
    Ok(g.value(out).clone())
}

/// Glorot-uniform `fan_in x fan_out` matrix.
pub fn xavier_init(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Tensor<f32> {
    assert!(fan_in > 0 && fan_out > 0, "fan dimensions must be positive");
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.gen_range(-bound..=bound) as f32)
        .collect();
    Tensor::matrix(fan_in, fan_out, data).expect("valid shape")
}
