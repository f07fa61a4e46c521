//! Seeded synthetic corpus: isolated dictionary clips and continuous targets
//! built from smooth frame-vector trajectories.
//!
//! Each gloss is a Catmull-Rom curve through a few random control points.
//! Targets chain several glosses at random speeds with a linear cross-fade
//! between neighbours, and every signer adds a constant style offset.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datastore::{self, Corpus, Split, TargetRecord};
use crate::error::{Error, Result};
use crate::features::VideoClip;
use crate::metrics::AnnotatedSegment;
use crate::numerics::{Rng, RngState, Tensor};

pub const MIN_BASE_LENGTH: usize = 10;
pub const MAX_BASE_LENGTH: usize = 24;

const VOCAB_STREAM: u64 = 1 << 32;
const SIGNER_STREAM: u64 = 2 << 32;
const DICTIONARY_STREAM: u64 = 3 << 32;

#[derive(Debug, Clone, PartialEq)]
pub struct SignPrototype {
    pub gloss_id: u32,
    /// `K x d_frame`.
    pub control_points: Tensor,
    pub base_length: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_categories: usize,
    /// Target signers; the dictionary signer is one more, never used in targets.
    pub n_signers: usize,
    pub d_frame: usize,
    pub targets: usize,
    pub signs_per_target: usize,
    pub control_points: usize,
    pub speed_range: [f64; 2],
    pub blend_frames: usize,
    pub noise_sigma: f64,
    pub signer_offset_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_categories: 20,
            n_signers: 4,
            d_frame: 16,
            targets: 200,
            signs_per_target: 5,
            control_points: 5,
            speed_range: [0.5, 2.0],
            blend_frames: 3,
            noise_sigma: 0.05,
            signer_offset_sigma: 0.25,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.speed_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::config(format!("speed range [{lo}, {hi}] invalid")));
        }
        if self.blend_frames >= MIN_BASE_LENGTH {
            return Err(Error::config(format!(
                "blend of {} frames not shorter than the shortest sign ({MIN_BASE_LENGTH})",
                self.blend_frames
            )));
        }
        if self.n_categories == 0 || self.n_signers == 0 || self.d_frame == 0 {
            return Err(Error::config("n_categories, n_signers and d_frame must be positive"));
        }
        if self.control_points < 3 {
            return Err(Error::config("need at least 3 control points"));
        }
        if self.signs_per_target == 0 || self.signs_per_target > self.n_categories {
            return Err(Error::config(format!(
                "signs_per_target {} must be in 1..={}",
                self.signs_per_target, self.n_categories
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.signer_offset_sigma >= 0.0) {
            return Err(Error::config("noise scales must be non-negative"));
        }
        Ok(())
    }

    /// The shortest rendering any sign can get, which must stay above the blend.
    fn check_renderable(&self) -> Result<()> {
        let shortest = (MIN_BASE_LENGTH as f64 / self.speed_range[1]).round() as usize;
        if shortest < 2 || shortest <= self.blend_frames {
            return Err(Error::config(format!(
                "speed {} renders a {MIN_BASE_LENGTH}-frame sign in {shortest} frames, too short for a {}-frame blend",
                self.speed_range[1], self.blend_frames
            )));
        }
        Ok(())
    }
}

pub fn gen_vocabulary(cfg: &SynthConfig) -> Result<Vec<SignPrototype>> {
    cfg.validate()?;
    (0..cfg.n_categories as u32)
        .map(|gloss_id| {
            let mut rng = RngState::new(cfg.seed, VOCAB_STREAM + gloss_id as u64).rng();
            let k = cfg.control_points;
            let points = (0..k * cfg.d_frame).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
            Ok(SignPrototype {
                gloss_id,
                control_points: Tensor::matrix(k, cfg.d_frame, points)?,
                base_length: rng.gen_range(MIN_BASE_LENGTH..=MAX_BASE_LENGTH),
            })
        })
        .collect()
}

/// Style offset of `signer`; signer ids `0..n_signers` appear in targets and
/// `n_signers` is the dictionary signer.
pub fn signer_offset(cfg: &SynthConfig, signer: u32) -> Vec<f32> {
    let mut rng = RngState::new(cfg.seed, SIGNER_STREAM + signer as u64).rng();
    gaussian(&mut rng, cfg.d_frame, cfg.signer_offset_sigma)
}

fn gaussian(rng: &mut Rng, n: usize, sigma: f64) -> Vec<f32> {
    if sigma == 0.0 {
        return vec![0.0; n];
    }
    let normal = Normal::new(0.0, sigma).expect("finite non-negative sigma");
    (0..n).map(|_| normal.sample(rng) as f32).collect()
}

/// Uniform Catmull-Rom curve through `points` (rows), at parameter
/// `u` in `[0, K - 1]`; passes through every control point.
fn catmull_rom(points: &Tensor, u: f64, out: &mut [f32]) {
    let k = points.rows();
    let seg = (u.floor() as usize).min(k - 2);
    let t = (u - seg as f64) as f32;
    let p = |i: isize| points.row(i.clamp(0, k as isize - 1) as usize);
    let (p0, p1, p2, p3) = (p(seg as isize - 1), p(seg as isize), p(seg as isize + 1), p(seg as isize + 2));
    if t == 1.0 {
        out.copy_from_slice(p2);
        return;
    }
    let (t2, t3) = (t * t, t * t * t);
    for (j, o) in out.iter_mut().enumerate() {
        *o = 0.5
            * (2.0 * p1[j]
                + (p2[j] - p0[j]) * t
                + (2.0 * p0[j] - 5.0 * p1[j] + 4.0 * p2[j] - p3[j]) * t2
                + (3.0 * p1[j] - p0[j] - 3.0 * p2[j] + p3[j]) * t3);
    }
}

/// `round(base_length / speed)` frames sampled evenly along the prototype
/// curve, each shifted by `signer_offset` plus gaussian noise.
pub fn render_sign(
    proto: &SignPrototype,
    speed: f64,
    signer_offset: &[f32],
    noise_sigma: f64,
    rng: &mut Rng,
) -> Result<VideoClip> {
    if !(speed > 0.0 && speed.is_finite()) {
        return Err(Error::config(format!("speed {speed} must be positive")));
    }
    let d = proto.control_points.cols();
    if signer_offset.len() != d {
        return Err(Error::shape(format!("offset of width {} for {d}-wide frames", signer_offset.len())));
    }
    let n = (proto.base_length as f64 / speed).round() as usize;
    if n < 2 {
        return Err(Error::config(format!("speed {speed} renders gloss {} in {n} frames", proto.gloss_id)));
    }
    let span = (proto.control_points.rows() - 1) as f64;
    let mut data = vec![0.0f32; n * d];
    for (i, frame) in data.chunks_mut(d).enumerate() {
        catmull_rom(&proto.control_points, span * i as f64 / (n - 1) as f64, frame);
        let noise = gaussian(rng, d, noise_sigma);
        for ((v, o), e) in frame.iter_mut().zip(signer_offset).zip(noise) {
            *v += o + e;
        }
    }
    VideoClip::new(Tensor::matrix(n, d, data)?)
}

/// Log-uniform draw from the speed range, so halving and doubling are equally likely.
fn sample_speed(cfg: &SynthConfig, rng: &mut Rng) -> f64 {
    let [lo, hi] = cfg.speed_range;
    if lo == hi {
        return lo;
    }
    rng.gen_range(lo.ln()..=hi.ln()).exp()
}

/// Concatenates rendered signs, cross-fading neighbours over `blend_frames`.
/// Annotations of neighbours meet at the middle of each blend.
pub fn blend_signs(signs: &[(u32, VideoClip)], blend: usize) -> Result<(VideoClip, Vec<AnnotatedSegment>)> {
    let Some((_, first)) = signs.first() else {
        return Err(Error::config("nothing to concatenate"));
    };
    let d = first.d_frame();
    let mut frames: Vec<f32> = Vec::new();
    let mut segments = Vec::with_capacity(signs.len());
    let mut seg_start = 0usize;
    for (i, (gloss, clip)) in signs.iter().enumerate() {
        let n = clip.n_frames();
        if clip.d_frame() != d {
            return Err(Error::shape("signs of different frame widths"));
        }
        let src = clip.frames().data();
        let overlap = if i == 0 { 0 } else { blend };
        if overlap >= n || frames.len() / d < overlap {
            return Err(Error::config(format!("blend of {blend} frames exceeds a {n}-frame sign")));
        }
        let base = frames.len() / d - overlap;
        for j in 0..overlap {
            let w = (j + 1) as f32 / (overlap + 1) as f32;
            let dst = &mut frames[(base + j) * d..(base + j + 1) * d];
            for (a, b) in dst.iter_mut().zip(&src[j * d..(j + 1) * d]) {
                *a = (1.0 - w) * *a + w * b;
            }
        }
        frames.extend_from_slice(&src[overlap * d..]);
        if i > 0 {
            let boundary = base + overlap.div_ceil(2);
            let prev: &mut AnnotatedSegment = segments.last_mut().expect("previous sign");
            prev.end = boundary;
            seg_start = boundary;
        }
        segments.push(AnnotatedSegment {
            gloss_id: *gloss,
            start: seg_start,
            end: base + n,
        });
    }
    let total = frames.len() / d;
    Ok((VideoClip::new(Tensor::matrix(total, d, frames)?)?, segments))
}

/// One continuous target of `signs_per_target` distinct glosses by `signer`.
pub fn gen_continuous(
    vocab: &[SignPrototype],
    cfg: &SynthConfig,
    signer: u32,
    rng: &mut Rng,
) -> Result<(VideoClip, Vec<AnnotatedSegment>)> {
    cfg.validate()?;
    if cfg.signs_per_target > vocab.len() {
        return Err(Error::config("fewer prototypes than signs per target"));
    }
    let offset = signer_offset(cfg, signer);
    let picks = sample(rng, vocab.len(), cfg.signs_per_target).into_vec();
    let mut signs = Vec::with_capacity(picks.len());
    for i in picks {
        let speed = sample_speed(cfg, rng);
        signs.push((vocab[i].gloss_id, render_sign(&vocab[i], speed, &offset, cfg.noise_sigma, rng)?));
    }
    blend_signs(&signs, cfg.blend_frames)
}

/// Dictionary exemplars at speed 1 by the held-out signer, plus every target.
/// Target `i` draws from RNG stream `i` and goes to validation when `i % 5 == 4`.
pub fn generate(cfg: &SynthConfig) -> Result<Corpus> {
    cfg.validate()?;
    cfg.check_renderable()?;
    let vocab = gen_vocabulary(cfg)?;
    let dictionary_signer = cfg.n_signers as u32;
    let dict_offset = signer_offset(cfg, dictionary_signer);
    let mut dictionary = BTreeMap::new();
    for p in &vocab {
        let mut rng = RngState::new(cfg.seed, DICTIONARY_STREAM + p.gloss_id as u64).rng();
        dictionary.insert(p.gloss_id, render_sign(p, 1.0, &dict_offset, cfg.noise_sigma, &mut rng)?);
    }
    let mut targets = Vec::with_capacity(cfg.targets);
    for i in 0..cfg.targets {
        let mut rng = RngState::new(cfg.seed, i as u64).rng();
        let signer = rng.gen_range(0..cfg.n_signers as u32);
        let (clip, annotations) = gen_continuous(&vocab, cfg, signer, &mut rng)?;
        targets.push(TargetRecord {
            name: format!("t{i:04}"),
            clip,
            annotations,
            signer,
            split: if i % 5 == 4 { Split::Val } else { Split::Train },
        });
    }
    Ok(Corpus {
        dictionary,
        dictionary_signer,
        targets,
    })
}

/// Generates the corpus and writes it under `dir`.
pub fn gen_corpus(cfg: &SynthConfig, dir: &Path) -> Result<Corpus> {
    let corpus = generate(cfg)?;
    datastore::write_corpus(dir, &corpus)?;
    Ok(corpus)
}
