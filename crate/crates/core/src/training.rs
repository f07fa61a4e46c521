//! Balanced pair construction and SGD training.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::datastore::{Corpus, Split};
use crate::error::{Error, Result};
use crate::features::{
    extract_adaptive_query, extract_target_sequence, projection_extractor, AdaptiveQueryFeatures, FeatureExtractor,
    ProjectionExtractor, TargetFeatureSequence, VideoClip,
};
use crate::metrics::{evaluate, segments_from_frames, AnnotatedSegment, MetricsReport, ScoredWindow};
use crate::model::{ModelConfig, SignLookupModel};
use crate::numerics::{Rng, RngState, BCE_CLAMP};

pub const WINDOW_LEN: usize = 64;
pub const WINDOW_STRIDE: usize = 32;

const SHUFFLE_STREAM: u64 = 0x7a11;

/// Per-parameter gradients in model layout order.
pub type Gradients = Vec<Vec<f32>>;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub query: AdaptiveQueryFeatures,
    pub target: TargetFeatureSequence,
    /// 1.0 where the window frame lies inside a segment of `gloss_id`.
    pub labels: Vec<f32>,
    pub gloss_id: u32,
}

impl TrainingPair {
    pub fn is_positive(&self) -> bool {
        self.labels.iter().any(|&l| l > 0.5)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchedulerConfig {
    pub patience: usize,
    pub factor: f64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            patience: 20,
            factor: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr0: f64,
    pub scheduler: SchedulerConfig,
    pub epochs: usize,
    pub seed: u64,
    /// Seed of the fixed projection feature extractor.
    pub extractor_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            lr0: 1e-2,
            scheduler: SchedulerConfig::default(),
            epochs: 60,
            seed: 0,
            extractor_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(self.scheduler.factor > 0.0 && self.scheduler.factor < 1.0) {
            return Err(Error::config(format!("scheduler factor {} outside (0, 1)", self.scheduler.factor)));
        }
        if self.scheduler.patience == 0 {
            return Err(Error::config("scheduler patience must be at least 1"));
        }
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return Err(Error::config(format!("learning rate {} invalid", self.lr0)));
        }
        Ok(())
    }
}

/// Window starts at stride 32, plus one end-aligned window when the stride
/// grid leaves a tail. Clips shorter than a window give a single start.
pub fn window_starts(n_frames: usize) -> Vec<usize> {
    tile_starts(n_frames, WINDOW_LEN, WINDOW_STRIDE)
}

/// [`window_starts`] for any window length and stride.
pub fn tile_starts(n_frames: usize, window: usize, stride: usize) -> Vec<usize> {
    if n_frames <= window {
        return vec![0];
    }
    let mut starts: Vec<usize> = (0..)
        .map(|i| i * stride.max(1))
        .take_while(|s| s + window <= n_frames)
        .collect();
    let last = n_frames - window;
    if *starts.last().unwrap() != last {
        starts.push(last);
    }
    starts
}

/// Per-frame probabilities for a whole target: the model runs on each tiled
/// window and frames covered by several windows get the mean.
pub fn spot_probabilities(
    model: &SignLookupModel,
    query: &AdaptiveQueryFeatures,
    target: &TargetFeatureSequence,
    window: usize,
    stride: usize,
) -> Result<Vec<f32>> {
    if window == 0 || stride == 0 {
        return Err(Error::config("spot window and stride must be positive"));
    }
    let n = target.len();
    let len = window.min(n);
    let mut sum = vec![0.0f64; n];
    let mut count = vec![0u32; n];
    for start in tile_starts(n, window, stride) {
        let p = crate::model::predict(query, &target.window(start, len), model)?;
        for (j, v) in p.into_iter().enumerate() {
            sum[start + j] += v as f64;
            count[start + j] += 1;
        }
    }
    Ok(sum.iter().zip(&count).map(|(s, &c)| (s / c as f64) as f32).collect())
}

/// Labels of frames `start..start + len` for `gloss`.
pub fn window_labels(segments: &[AnnotatedSegment], gloss: u32, start: usize, len: usize) -> Vec<f32> {
    let mut labels = vec![0.0; len];
    for s in segments.iter().filter(|s| s.gloss_id == gloss) {
        let lo = s.start.max(start);
        let hi = s.end.min(start + len);
        for l in labels.iter_mut().take(hi.saturating_sub(start)).skip(lo.saturating_sub(start)) {
            *l = 1.0;
        }
    }
    labels
}

struct Window<'a> {
    target: &'a TargetFeatureSequence,
    segments: &'a [AnnotatedSegment],
    start: usize,
    len: usize,
    present: BTreeSet<u32>,
}

/// One positive pair per (window, gloss overlapping it), and as many
/// negatives drawn uniformly without replacement from all (window, absent
/// gloss) combinations.
pub fn build_pairs(
    targets: &[(&VideoClip, &[AnnotatedSegment])],
    dictionary: &BTreeMap<u32, VideoClip>,
    ex: &dyn FeatureExtractor,
    levels: usize,
    rng: &mut Rng,
) -> Result<Vec<TrainingPair>> {
    for (_, segs) in targets {
        if let Some(s) = segs.iter().find(|s| !dictionary.contains_key(&s.gloss_id)) {
            return Err(Error::Corpus(format!("gloss {} has no dictionary entry", s.gloss_id)));
        }
    }
    let queries: BTreeMap<u32, AdaptiveQueryFeatures> = dictionary
        .iter()
        .map(|(&g, clip)| Ok((g, extract_adaptive_query(clip, ex, levels)?)))
        .collect::<Result<_>>()?;
    let sequences: Vec<TargetFeatureSequence> = targets
        .iter()
        .map(|(clip, _)| extract_target_sequence(clip, ex))
        .collect::<Result<_>>()?;

    let mut windows = Vec::new();
    for ((clip, segs), seq) in targets.iter().zip(&sequences) {
        let n = clip.n_frames();
        for start in window_starts(n) {
            let len = WINDOW_LEN.min(n);
            let present = segs
                .iter()
                .filter(|s| s.start < start + len && s.end > start)
                .map(|s| s.gloss_id)
                .collect();
            windows.push(Window {
                target: seq,
                segments: segs,
                start,
                len,
                present,
            });
        }
    }

    let make = |w: &Window, gloss: u32| TrainingPair {
        query: queries[&gloss].clone(),
        target: w.target.window(w.start, w.len),
        labels: window_labels(w.segments, gloss, w.start, w.len),
        gloss_id: gloss,
    };
    let mut pairs = Vec::new();
    for w in &windows {
        for &g in &w.present {
            pairs.push(make(w, g));
        }
    }
    let n_pos = pairs.len();
    let candidates: Vec<(usize, u32)> = windows
        .iter()
        .enumerate()
        .flat_map(|(i, w)| queries.keys().filter(|g| !w.present.contains(g)).map(move |&g| (i, g)))
        .collect();
    if candidates.len() < n_pos {
        return Err(Error::Corpus(format!(
            "only {} negative combinations for {n_pos} positives",
            candidates.len()
        )));
    }
    let mut picks = sample(rng, candidates.len(), n_pos).into_vec();
    picks.sort_unstable();
    for i in picks {
        let (w, g) = candidates[i];
        pairs.push(make(&windows[w], g));
    }
    Ok(pairs)
}

/// Pairs of one split of a corpus.
pub fn corpus_pairs(
    corpus: &Corpus,
    split: Split,
    ex: &dyn FeatureExtractor,
    levels: usize,
    rng: &mut Rng,
) -> Result<Vec<TrainingPair>> {
    let targets: Vec<(&VideoClip, &[AnnotatedSegment])> = corpus
        .split(split)
        .map(|t| (&t.clip, t.annotations.as_slice()))
        .collect();
    build_pairs(&targets, &corpus.dictionary, ex, levels, rng)
}

/// Mean binary cross-entropy with probabilities clamped to `[1e-7, 1 - 1e-7]`.
pub fn bce_loss(p: &[f32], labels: &[f32]) -> Result<f64> {
    if p.len() != labels.len() || p.is_empty() {
        return Err(Error::shape(format!("{} probabilities for {} labels", p.len(), labels.len())));
    }
    let total: f64 = p
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = (p as f64).clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            let y = y as f64;
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / p.len() as f64)
}

/// `theta -= lr * grad` for every parameter.
pub fn sgd_step(model: &mut SignLookupModel, grads: &Gradients, lr: f32) -> Result<()> {
    let params = model.params_mut();
    if grads.len() != params.len() || grads.iter().zip(params.iter()).any(|(g, p)| g.len() != p.len()) {
        return Err(Error::shape("gradients do not match model parameters"));
    }
    for (p, g) in params.iter_mut().zip(grads) {
        for (v, d) in p.data_mut().iter_mut().zip(g) {
            *v -= lr * d;
        }
    }
    Ok(())
}

/// Reduce-on-plateau state; lower metrics are better.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlateauState {
    pub lr: f64,
    pub best: f64,
    pub stalled: usize,
    pub patience: usize,
    pub factor: f64,
}

impl PlateauState {
    pub fn new(lr: f64, cfg: SchedulerConfig) -> Self {
        PlateauState {
            lr,
            best: f64::INFINITY,
            stalled: 0,
            patience: cfg.patience,
            factor: cfg.factor,
        }
    }

    /// Records one metric and returns the learning rate to use next.
    pub fn step(&mut self, metric: f64) -> f64 {
        if metric < self.best {
            self.best = metric;
            self.stalled = 0;
        } else {
            self.stalled += 1;
            if self.stalled >= self.patience {
                self.lr *= self.factor;
                self.stalled = 0;
            }
        }
        self.lr
    }
}

pub fn plateau_schedule(mut state: PlateauState, metric: f64) -> (PlateauState, f64) {
    let lr = state.step(metric);
    (state, lr)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    /// Learning rate used during this epoch.
    pub lr: f64,
}

pub const HISTORY_HEADER: &str = "epoch,train_loss,val_loss,val_acc";

impl EpochRecord {
    pub fn csv_line(&self) -> String {
        format!("{},{:.6},{:.6},{:.6}", self.epoch, self.train_loss, self.val_loss, self.val_acc)
    }
}

/// Mean inference-mode loss and pooled frame accuracy at threshold 0.5.
pub fn evaluate_pairs(model: &SignLookupModel, pairs: &[TrainingPair]) -> Result<(f64, f64)> {
    if pairs.is_empty() {
        return Err(Error::shape("no pairs to evaluate"));
    }
    let mut loss = 0.0;
    let (mut correct, mut frames) = (0usize, 0usize);
    for pair in pairs {
        let (p, l) = model.predict_with_loss(&pair.query, &pair.target, &pair.labels)?;
        loss += l as f64;
        correct += p.iter().zip(&pair.labels).filter(|(p, y)| (**p >= 0.5) == (**y > 0.5)).count();
        frames += p.len();
    }
    Ok((loss / pairs.len() as f64, correct as f64 / frames as f64))
}

/// Acc and F1@k over pairs, each pair scored as one window.
pub fn pair_metrics(model: &SignLookupModel, pairs: &[TrainingPair], threshold: f32, ks: &[u32]) -> Result<MetricsReport> {
    let windows: Vec<ScoredWindow> = pairs
        .iter()
        .map(|pair| {
            Ok(ScoredWindow {
                probs: crate::model::predict(&pair.query, &pair.target, model)?,
                gt: segments_from_frames(&pair.labels, 0.5, 0),
            })
        })
        .collect::<Result<_>>()?;
    evaluate(&windows, threshold, ks)
}

/// Everything one training run on a corpus produces.
pub struct FitOutcome {
    pub model: SignLookupModel,
    pub history: Vec<EpochRecord>,
    pub extractor: ProjectionExtractor,
    pub val_pairs: Vec<TrainingPair>,
}

const PAIR_STREAM: u64 = 0x9a1;

/// Builds pairs from both splits, initializes a model from `train_cfg.seed`
/// and trains it.
pub fn fit_corpus(
    corpus: &Corpus,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<FitOutcome> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    let extractor = projection_extractor(corpus.d_frame()?, model_cfg.d_feat, train_cfg.extractor_seed)?;
    let mut rng = RngState::new(train_cfg.seed, PAIR_STREAM).rng();
    let pairs = corpus_pairs(corpus, Split::Train, &extractor, model_cfg.levels, &mut rng)?;
    let val_pairs = corpus_pairs(corpus, Split::Val, &extractor, model_cfg.levels, &mut rng)?;
    let model = SignLookupModel::new(model_cfg.clone(), train_cfg.seed)?;
    let (model, history) = train(model, &pairs, &val_pairs, train_cfg, on_epoch)?;
    Ok(FitOutcome {
        model,
        history,
        extractor,
        val_pairs,
    })
}

fn as_divergence(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::NumericInput(_) => Error::Divergence {
            epoch,
            batch,
            loss: f64::NAN,
        },
        other => other,
    }
}

/// Shuffled mini-batch SGD with dropout, stepping the plateau scheduler on
/// validation loss after each epoch (on training loss when there is no
/// validation set). `on_epoch` sees every record as it is produced.
pub fn train(
    mut model: SignLookupModel,
    pairs: &[TrainingPair],
    val_pairs: &[TrainingPair],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(SignLookupModel, Vec<EpochRecord>)> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::Corpus("no training pairs".into()));
    }
    let mut rng = RngState::new(cfg.seed, SHUFFLE_STREAM).rng();
    let mut sched = PlateauState::new(cfg.lr0, cfg.scheduler);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let dropout_on = model.config().dropout > 0.0;
    for epoch in 1..=cfg.epochs {
        let lr = sched.lr;
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
            let mut acc: Option<Gradients> = None;
            for &i in idx {
                let pair = &pairs[i];
                let (loss, grads) = model
                    .loss_and_grads(&pair.query, &pair.target, &pair.labels, dropout_on.then_some(&mut rng))
                    .map_err(|e| as_divergence(e, epoch, batch))?;
                if !loss.is_finite() {
                    return Err(Error::Divergence {
                        epoch,
                        batch,
                        loss: loss as f64,
                    });
                }
                total += loss as f64;
                match acc.as_mut() {
                    None => acc = Some(grads),
                    Some(a) => {
                        for (x, g) in a.iter_mut().zip(&grads) {
                            for (u, v) in x.iter_mut().zip(g) {
                                *u += v;
                            }
                        }
                    }
                }
            }
            let scale = lr as f32 / idx.len() as f32;
            sgd_step(&mut model, &acc.expect("non-empty batch"), scale)?;
            if model.params().iter().any(|t| !t.is_finite()) {
                return Err(Error::Divergence {
                    epoch,
                    batch,
                    loss: f64::INFINITY,
                });
            }
        }
        let train_loss = total / pairs.len() as f64;
        let (val_loss, val_acc) = if val_pairs.is_empty() {
            (train_loss, f64::NAN)
        } else {
            evaluate_pairs(&model, val_pairs).map_err(|e| as_divergence(e, epoch, 0))?
        };
        sched.step(val_loss);
        let rec = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_acc,
            lr,
        };
        on_epoch(&rec);
        history.push(rec);
    }
    Ok((model, history))
}
