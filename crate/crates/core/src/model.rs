//! The spotting network.
//!
//! Query features are embedded and self-attended across temporal scales by the
//! encoder. Target features are embedded, given sinusoidal positions, then
//! decoded with self-attention over the target followed by cross-attention
//! into the encoded query scales. An MLP head turns each decoded frame into
//! two logits; the positive-class softmax probability is the spotting score.
//!
//! All sublayers are post-norm residual blocks. No attention is masked.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{AdaptiveQueryFeatures, TargetFeatureSequence};
use crate::numerics::layers::{
    feed_forward_on_graph, mha_on_graph, residual_norm, AttentionVars, FeedForwardVars, NormVars,
    LEAKY_SLOPE,
};
use crate::numerics::{grad_check, xavier_init, GradCheckReport, Graph, LossEval, Rng, RngState, Scalar, Tensor, Var};

pub const DEFAULT_BATCH_SIZE: usize = 8;
/// Index of the "query present" logit.
pub const POSITIVE_CLASS: usize = 1;
const INIT_STREAM: u64 = 0x1417;
const GRADCHECK_DATA_STREAM: u64 = 99;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_feat: usize,
    pub d_model: usize,
    pub n_heads: usize,
    /// Layers in the encoder and, separately, in the decoder.
    pub n_layers: usize,
    pub d_ff: usize,
    /// Number of adaptive query levels (strides 1, 2, 4, ...).
    pub levels: usize,
    pub dropout: f64,
    /// Output width of each MLP layer; the first must equal `d_model`, the last 2.
    pub mlp_dims: Vec<usize>,
    pub positional_encoding: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        default_config()
    }
}

pub fn default_config() -> ModelConfig {
    let d_model = 64;
    ModelConfig {
        d_feat: 64,
        d_model,
        n_heads: 4,
        n_layers: 4,
        d_ff: 2 * d_model,
        levels: 4,
        dropout: 0.3,
        mlp_dims: scaled_mlp_dims(d_model),
        positional_encoding: true,
    }
}

/// `[d, d/2, d/4, d/8, 2]`, never narrower than 1.
pub fn scaled_mlp_dims(d_model: usize) -> Vec<usize> {
    vec![
        d_model,
        (d_model / 2).max(1),
        (d_model / 4).max(1),
        (d_model / 8).max(1),
        2,
    ]
}

impl ModelConfig {
    /// Same config with a different width; rescales `d_ff` and the MLP.
    pub fn with_width(mut self, d_model: usize) -> Self {
        self.d_model = d_model;
        self.d_ff = 2 * d_model;
        self.mlp_dims = scaled_mlp_dims(d_model);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_feat == 0 || self.d_model == 0 || self.d_ff == 0 {
            return Err(Error::config("dimensions must be positive"));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_model % 2 != 0 {
            return Err(Error::config("d_model must be even for positional encoding"));
        }
        if self.levels == 0 {
            return Err(Error::config("levels must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        match self.mlp_dims.as_slice() {
            [first, .., 2] if *first == self.d_model && self.mlp_dims.iter().all(|&d| d > 0) => Ok(()),
            _ => Err(Error::config(format!(
                "mlp_dims {:?} must start at d_model {} and end at 2",
                self.mlp_dims, self.d_model
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    Xavier,
    Zeros,
    Ones,
}

#[derive(Debug, Clone)]
struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

#[derive(Debug, Clone, Copy)]
struct EncoderIdx {
    attn: usize,
    norm1: usize,
    ff: usize,
    norm2: usize,
}

#[derive(Debug, Clone, Copy)]
struct DecoderIdx {
    self_attn: usize,
    norm1: usize,
    cross_attn: usize,
    norm2: usize,
    ff: usize,
    norm3: usize,
}

/// Fixed parameter order. Serialized models store tensors in this order.
#[derive(Debug, Clone)]
struct Layout {
    specs: Vec<ParamSpec>,
    query_embed: usize,
    target_embed: usize,
    encoder: Vec<EncoderIdx>,
    decoder: Vec<DecoderIdx>,
    mlp: Vec<usize>,
}

struct LayoutBuilder {
    specs: Vec<ParamSpec>,
    d: usize,
    d_ff: usize,
}

impl LayoutBuilder {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.specs.push(ParamSpec { name, shape, init });
        self.specs.len() - 1
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> usize {
        let w = self.push(format!("{name}.weight"), vec![fan_in, fan_out], Init::Xavier);
        self.push(format!("{name}.bias"), vec![fan_out], Init::Zeros);
        w
    }

    /// q, k, v and output projections as consecutive (weight, bias) pairs.
    fn attention(&mut self, name: &str) -> usize {
        let d = self.d;
        let base = self.linear(&format!("{name}.q"), d, d);
        for p in ["k", "v", "out"] {
            self.linear(&format!("{name}.{p}"), d, d);
        }
        base
    }

    fn norm(&mut self, name: &str) -> usize {
        let g = self.push(format!("{name}.gain"), vec![self.d], Init::Ones);
        self.push(format!("{name}.bias"), vec![self.d], Init::Zeros);
        g
    }

    fn feed_forward(&mut self, name: &str) -> usize {
        let (d, d_ff) = (self.d, self.d_ff);
        let w = self.linear(&format!("{name}.fc1"), d, d_ff);
        self.linear(&format!("{name}.fc2"), d_ff, d);
        w
    }
}

impl Layout {
    fn new(cfg: &ModelConfig) -> Self {
        let mut b = LayoutBuilder {
            specs: Vec::new(),
            d: cfg.d_model,
            d_ff: cfg.d_ff,
        };
        let query_embed = b.linear("query_embed", cfg.d_feat, cfg.d_model);
        let target_embed = b.linear("target_embed", cfg.d_feat, cfg.d_model);
        let encoder = (0..cfg.n_layers)
            .map(|l| EncoderIdx {
                attn: b.attention(&format!("encoder.{l}.self_attn")),
                norm1: b.norm(&format!("encoder.{l}.norm1")),
                ff: b.feed_forward(&format!("encoder.{l}.ff")),
                norm2: b.norm(&format!("encoder.{l}.norm2")),
            })
            .collect();
        let decoder = (0..cfg.n_layers)
            .map(|l| DecoderIdx {
                self_attn: b.attention(&format!("decoder.{l}.self_attn")),
                norm1: b.norm(&format!("decoder.{l}.norm1")),
                cross_attn: b.attention(&format!("decoder.{l}.cross_attn")),
                norm2: b.norm(&format!("decoder.{l}.norm2")),
                ff: b.feed_forward(&format!("decoder.{l}.ff")),
                norm3: b.norm(&format!("decoder.{l}.norm3")),
            })
            .collect();
        let mut width = cfg.d_model;
        let mut mlp = Vec::with_capacity(cfg.mlp_dims.len());
        for (i, &out) in cfg.mlp_dims.iter().enumerate() {
            mlp.push(b.linear(&format!("mlp.{i}"), width, out));
            width = out;
        }
        Layout {
            specs: b.specs,
            query_embed,
            target_embed,
            encoder,
            decoder,
            mlp,
        }
    }
}

fn attn_vars(p: &[Var], base: usize) -> AttentionVars {
    AttentionVars {
        wq: p[base],
        bq: p[base + 1],
        wk: p[base + 2],
        bk: p[base + 3],
        wv: p[base + 4],
        bv: p[base + 5],
        wo: p[base + 6],
        bo: p[base + 7],
    }
}

fn ff_vars(p: &[Var], base: usize) -> FeedForwardVars {
    FeedForwardVars {
        w1: p[base],
        b1: p[base + 1],
        w2: p[base + 2],
        b2: p[base + 3],
    }
}

fn norm_vars(p: &[Var], base: usize) -> NormVars {
    NormVars {
        gain: p[base],
        bias: p[base + 1],
    }
}

/// All learned parameters plus the architecture that shapes them.
#[derive(Debug, Clone, PartialEq)]
pub struct SignLookupModel {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
}

impl SignLookupModel {
    /// Xavier-uniform weights, zero biases, unit norm gains.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut rng = RngState::new(seed, INIT_STREAM).rng();
        let params = layout
            .specs
            .iter()
            .map(|s| match s.init {
                Init::Xavier => xavier_init(s.shape[0], s.shape[1], &mut rng),
                Init::Zeros => Tensor::zeros(&s.shape),
                Init::Ones => Tensor::filled(&s.shape, 1.0),
            })
            .collect();
        let names = layout.specs.into_iter().map(|s| s.name).collect();
        Ok(SignLookupModel {
            config,
            names,
            params,
        })
    }

    /// Rebuilds a model from tensors in layout order, checking names and shapes.
    pub fn from_parts(config: ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if named.len() != layout.specs.len() {
            return Err(Error::shape(format!(
                "expected {} parameter tensors, got {}",
                layout.specs.len(),
                named.len()
            )));
        }
        let mut names = Vec::with_capacity(named.len());
        let mut params = Vec::with_capacity(named.len());
        for (spec, (name, t)) in layout.specs.iter().zip(named) {
            if spec.name != name || spec.shape != t.shape() {
                return Err(Error::shape(format!(
                    "parameter {name} {:?} does not match expected {} {:?}",
                    t.shape(),
                    spec.name,
                    spec.shape
                )));
            }
            t.ensure_finite(&name)?;
            names.push(name);
            params.push(t);
        }
        Ok(SignLookupModel {
            config,
            names,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn param_by_name(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn param_by_name_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(move |i| &mut self.params[i])
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Mean BCE of one pair and its gradients with respect to every parameter.
    /// Dropout is active iff `rng` is given.
    pub fn loss_and_grads(
        &self,
        query: &AdaptiveQueryFeatures,
        target: &TargetFeatureSequence,
        labels: &[f32],
        rng: Option<&mut Rng>,
    ) -> Result<(f32, Vec<Vec<f32>>)> {
        let eval = pair_loss(&self.config, &self.params, &query.x, &target.y, labels, rng, true)?;
        Ok((eval.loss as f32, eval.grads.expect("gradients requested")))
    }

    /// Per-frame probabilities of one pair and their mean BCE, without gradients.
    pub fn predict_with_loss(
        &self,
        query: &AdaptiveQueryFeatures,
        target: &TargetFeatureSequence,
        labels: &[f32],
    ) -> Result<(Vec<f32>, f32)> {
        let layout = Layout::new(&self.config);
        let mut g = Graph::new();
        let pv = self.on_graph(&mut g);
        let fw = build(&mut g, &self.config, &layout, &pv, &query.x, &target.y, None)?;
        let loss = g.bce_mean(fw.p, labels)?;
        Ok((g.value(fw.p).data().to_vec(), g.value(loss).data()[0]))
    }

    fn on_graph<S: Scalar>(&self, g: &mut Graph<S>) -> Vec<Var> {
        self.params.iter().map(|t| g.input(t.cast())).collect()
    }
}

/// Loss and (optionally) gradients for arbitrary parameter values at any
/// precision. This is the path gradient checks exercise.
pub fn pair_loss<S: Scalar>(
    config: &ModelConfig,
    params: &[Tensor<S>],
    query: &Tensor<S>,
    target: &Tensor<S>,
    labels: &[S],
    rng: Option<&mut Rng>,
    want_grads: bool,
) -> Result<LossEval<S>> {
    let layout = Layout::new(config);
    let mut g = Graph::new();
    let pv: Vec<Var> = params.iter().map(|t| g.input(t.clone())).collect();
    let fw = build(&mut g, config, &layout, &pv, query, target, rng)?;
    let loss = g.bce_mean(fw.p, labels)?;
    let value = g.value(loss).data()[0].to_f64_lossy();
    let kink_signature = Some(g.kink_signature());
    if !want_grads {
        return Ok(LossEval {
            loss: value,
            grads: None,
            kink_signature,
        });
    }
    g.backward(loss)?;
    let grads = pv
        .iter()
        .zip(params)
        .map(|(&v, t)| g.take_grad(v).unwrap_or_else(|| vec![S::zero(); t.len()]))
        .collect();
    Ok(LossEval {
        loss: value,
        grads: Some(grads),
        kink_signature,
    })
}

/// Width 8, one layer, one head, two query levels, no dropout.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        d_feat: 8,
        n_heads: 1,
        n_layers: 1,
        levels: 2,
        dropout: 0.0,
        ..default_config().with_width(8)
    }
}

pub const TINY_TARGET_LEN: usize = 6;

#[derive(Debug, Clone)]
pub struct TinyGradCheck {
    pub report: GradCheckReport,
    /// Name of the parameter holding the worst element.
    pub worst_name: String,
    pub num_scalars: usize,
}

/// Finite-difference check of every parameter of a [`tiny_config`] model in
/// f64, on random features and a fixed label pattern.
pub fn tiny_grad_check(seed: u64, eps: f64) -> Result<TinyGradCheck> {
    let config = tiny_config();
    let model = SignLookupModel::new(config.clone(), seed)?;
    let mut rng = RngState::new(seed, GRADCHECK_DATA_STREAM).rng();
    let mut uniform = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect() };
    let x = Tensor::<f64>::matrix(config.levels, config.d_feat, uniform(config.levels * config.d_feat))?;
    let y = Tensor::<f64>::matrix(TINY_TARGET_LEN, config.d_feat, uniform(TINY_TARGET_LEN * config.d_feat))?;
    let labels = [0.0, 1.0, 1.0, 0.0, 0.0, 1.0];
    let params: Vec<Tensor<f64>> = model.params().iter().map(|t| t.cast()).collect();
    let report = grad_check(&params, eps, |p, want| pair_loss(&config, p, &x, &y, &labels, None, want))?;
    Ok(TinyGradCheck {
        worst_name: model.param_names()[report.worst_param].clone(),
        num_scalars: model.num_scalars(),
        report,
    })
}

/// `sin(t / 10000^(2i/d))` at even components, `cos` of the same angle at odd ones.
pub fn positional_encoding(t: usize, d_model: usize) -> Result<Vec<f32>> {
    Ok(pe_row::<f32>(t, d_model)?)
}

fn pe_row<S: Scalar>(t: usize, d_model: usize) -> Result<Vec<S>> {
    if d_model == 0 || d_model % 2 != 0 {
        return Err(Error::config(format!("positional encoding needs even width, got {d_model}")));
    }
    let mut out = vec![S::zero(); d_model];
    for i in 0..d_model / 2 {
        let angle = t as f64 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
        out[2 * i] = S::from_f64_lossy(angle.sin());
        out[2 * i + 1] = S::from_f64_lossy(angle.cos());
    }
    Ok(out)
}

fn pe_matrix<S: Scalar>(len: usize, d_model: usize) -> Result<Tensor<S>> {
    let mut data = Vec::with_capacity(len * d_model);
    for t in 0..len {
        data.extend(pe_row::<S>(t, d_model)?);
    }
    Tensor::matrix(len, d_model, data)
}

struct ForwardVars {
    f: Var,
    g_hat: Var,
    z: Var,
    h: Var,
    p: Var,
}

fn check_features<S: Scalar>(cfg: &ModelConfig, t: &Tensor<S>, what: &str) -> Result<()> {
    if t.shape().len() != 2 || t.cols() != cfg.d_feat {
        return Err(Error::shape(format!(
            "{what} features {:?} do not have width d_feat = {}",
            t.shape(),
            cfg.d_feat
        )));
    }
    Ok(())
}

fn embed_stage<S: Scalar>(
    g: &mut Graph<S>,
    cfg: &ModelConfig,
    lay: &Layout,
    pv: &[Var],
    x: &Tensor<S>,
    y: &Tensor<S>,
) -> Result<(Var, Var)> {
    check_features(cfg, x, "query")?;
    check_features(cfg, y, "target")?;
    let xv = g.input(x.clone());
    let f = g.linear(xv, pv[lay.query_embed], pv[lay.query_embed + 1])?;
    let yv = g.input(y.clone());
    let emb = g.linear(yv, pv[lay.target_embed], pv[lay.target_embed + 1])?;
    let g_hat = if cfg.positional_encoding {
        let pe = g.input(pe_matrix(y.rows(), cfg.d_model)?);
        g.add(emb, pe)?
    } else {
        emb
    };
    Ok((f, g_hat))
}

fn encode_stage<S: Scalar>(
    g: &mut Graph<S>,
    cfg: &ModelConfig,
    lay: &Layout,
    pv: &[Var],
    f: Var,
    mut rng: Option<&mut Rng>,
) -> Result<Var> {
    let mut x = f;
    for l in &lay.encoder {
        let a = mha_on_graph(g, x, x, &attn_vars(pv, l.attn), cfg.n_heads)?;
        x = residual_norm(g, x, a, &norm_vars(pv, l.norm1), cfg.dropout, rng.as_deref_mut())?;
        let h = feed_forward_on_graph(g, x, &ff_vars(pv, l.ff))?;
        x = residual_norm(g, x, h, &norm_vars(pv, l.norm2), cfg.dropout, rng.as_deref_mut())?;
    }
    Ok(x)
}

fn decode_stage<S: Scalar>(
    g: &mut Graph<S>,
    cfg: &ModelConfig,
    lay: &Layout,
    pv: &[Var],
    g_hat: Var,
    z: Var,
    mut rng: Option<&mut Rng>,
) -> Result<Var> {
    if g.value(g_hat).cols() != g.value(z).cols() {
        return Err(Error::shape("target and query states differ in width"));
    }
    let mut x = g_hat;
    for l in &lay.decoder {
        let a = mha_on_graph(g, x, x, &attn_vars(pv, l.self_attn), cfg.n_heads)?;
        x = residual_norm(g, x, a, &norm_vars(pv, l.norm1), cfg.dropout, rng.as_deref_mut())?;
        let c = mha_on_graph(g, x, z, &attn_vars(pv, l.cross_attn), cfg.n_heads)?;
        x = residual_norm(g, x, c, &norm_vars(pv, l.norm2), cfg.dropout, rng.as_deref_mut())?;
        let h = feed_forward_on_graph(g, x, &ff_vars(pv, l.ff))?;
        x = residual_norm(g, x, h, &norm_vars(pv, l.norm3), cfg.dropout, rng.as_deref_mut())?;
    }
    Ok(x)
}

/// Returns the positive-class probability per row.
fn classify_stage<S: Scalar>(
    g: &mut Graph<S>,
    cfg: &ModelConfig,
    lay: &Layout,
    pv: &[Var],
    h: Var,
    mut rng: Option<&mut Rng>,
) -> Result<Var> {
    if g.value(h).cols() != cfg.mlp_dims[0] {
        return Err(Error::config("mlp input width differs from d_model"));
    }
    let slope = S::from_f64_lossy(LEAKY_SLOPE);
    let last = lay.mlp.len() - 1;
    let mut a = h;
    for (i, &base) in lay.mlp.iter().enumerate() {
        let out = g.linear(a, pv[base], pv[base + 1])?;
        if i == last {
            a = out;
            break;
        }
        let pre = if i == 0 { g.add(a, out)? } else { out };
        let act = g.leaky_relu(pre, slope)?;
        a = g.dropout(act, cfg.dropout, rng.as_deref_mut())?;
    }
    let probs = g.softmax_rows(a)?;
    g.column(probs, POSITIVE_CLASS)
}

fn build<S: Scalar>(
    g: &mut Graph<S>,
    cfg: &ModelConfig,
    lay: &Layout,
    pv: &[Var],
    x: &Tensor<S>,
    y: &Tensor<S>,
    mut rng: Option<&mut Rng>,
) -> Result<ForwardVars> {
    let (f, g_hat) = embed_stage(g, cfg, lay, pv, x, y)?;
    let z = encode_stage(g, cfg, lay, pv, f, rng.as_deref_mut())?;
    let h = decode_stage(g, cfg, lay, pv, g_hat, z, rng.as_deref_mut())?;
    let p = classify_stage(g, cfg, lay, pv, h, rng)?;
    Ok(ForwardVars { f, g_hat, z, h, p })
}

/// Every intermediate of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardActivations {
    pub f: Tensor,
    pub g_hat: Tensor,
    pub z: Tensor,
    pub h: Tensor,
    pub p: Vec<f32>,
}

struct Session {
    graph: Graph<f32>,
    layout: Layout,
    params: Vec<Var>,
    rng: Option<Rng>,
}

impl Session {
    fn new(model: &SignLookupModel, rng: &RngState, training: bool) -> Self {
        let mut graph = Graph::new();
        let params = model.on_graph(&mut graph);
        Session {
            graph,
            layout: Layout::new(&model.config),
            params,
            rng: training.then(|| rng.rng()),
        }
    }
}

pub fn embed(
    x: &AdaptiveQueryFeatures,
    y: &TargetFeatureSequence,
    model: &SignLookupModel,
) -> Result<(Tensor, Tensor)> {
    let mut s = Session::new(model, &RngState::new(0, 0), false);
    let (f, g_hat) = embed_stage(&mut s.graph, &model.config, &s.layout, &s.params, &x.x, &y.y)?;
    Ok((s.graph.value(f).clone(), s.graph.value(g_hat).clone()))
}

pub fn encode(f: &Tensor, model: &SignLookupModel, rng: &RngState, training: bool) -> Result<Tensor> {
    check_width(f, model.config.d_model)?;
    let mut s = Session::new(model, rng, training);
    let fv = s.graph.input(f.clone());
    let z = encode_stage(&mut s.graph, &model.config, &s.layout, &s.params, fv, s.rng.as_mut())?;
    Ok(s.graph.value(z).clone())
}

pub fn decode(
    g_hat: &Tensor,
    z: &Tensor,
    model: &SignLookupModel,
    rng: &RngState,
    training: bool,
) -> Result<Tensor> {
    check_width(g_hat, model.config.d_model)?;
    check_width(z, model.config.d_model)?;
    let mut s = Session::new(model, rng, training);
    let gv = s.graph.input(g_hat.clone());
    let zv = s.graph.input(z.clone());
    let h = decode_stage(&mut s.graph, &model.config, &s.layout, &s.params, gv, zv, s.rng.as_mut())?;
    Ok(s.graph.value(h).clone())
}

pub fn classify(h: &Tensor, model: &SignLookupModel, rng: &RngState, training: bool) -> Result<Vec<f32>> {
    check_width(h, model.config.d_model)?;
    let mut s = Session::new(model, rng, training);
    let hv = s.graph.input(h.clone());
    let p = classify_stage(&mut s.graph, &model.config, &s.layout, &s.params, hv, s.rng.as_mut())?;
    Ok(s.graph.value(p).data().to_vec())
}

pub fn forward(
    x: &AdaptiveQueryFeatures,
    y: &TargetFeatureSequence,
    model: &SignLookupModel,
    rng: &RngState,
    training: bool,
) -> Result<ForwardActivations> {
    let mut s = Session::new(model, rng, training);
    let fw = build(&mut s.graph, &model.config, &s.layout, &s.params, &x.x, &y.y, s.rng.as_mut())?;
    let g = &s.graph;
    Ok(ForwardActivations {
        f: g.value(fw.f).clone(),
        g_hat: g.value(fw.g_hat).clone(),
        z: g.value(fw.z).clone(),
        h: g.value(fw.h).clone(),
        p: g.value(fw.p).data().to_vec(),
    })
}

/// Inference-mode probabilities only, kept strictly inside `(0, 1)` even
/// where f32 softmax saturates.
pub fn predict(x: &AdaptiveQueryFeatures, y: &TargetFeatureSequence, model: &SignLookupModel) -> Result<Vec<f32>> {
    let mut s = Session::new(model, &RngState::new(0, 0), false);
    let fw = build(&mut s.graph, &model.config, &s.layout, &s.params, &x.x, &y.y, None)?;
    let below_one = f32::from_bits(1.0f32.to_bits() - 1);
    Ok(s.graph
        .value(fw.p)
        .data()
        .iter()
        .map(|&p| p.clamp(f32::MIN_POSITIVE, below_one))
        .collect())
}

fn check_width(t: &Tensor, d: usize) -> Result<()> {
    if t.shape().len() != 2 || t.cols() != d {
        return Err(Error::shape(format!("expected rows of width {d}, got {:?}", t.shape())));
    }
    Ok(())
}
