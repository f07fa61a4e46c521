//! Frame-wise accuracy and segmental F1@k.
//!
//! A predicted segment is a true positive at threshold `k` when its IoU with
//! a not-yet-matched ground-truth segment reaches `k / 100`. Predictions are
//! visited in start order and each one takes the remaining ground-truth
//! segment of highest IoU.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Half-open frame span `[start, end)` carrying a gloss id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AnnotatedSegment {
    pub gloss_id: u32,
    pub start: usize,
    pub end: usize,
}

impl AnnotatedSegment {
    pub fn new(gloss_id: u32, start: usize, end: usize) -> Result<Self> {
        let s = AnnotatedSegment {
            gloss_id,
            start,
            end,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.start >= self.end {
            return Err(Error::Segment(format!(
                "start {} not before end {}",
                self.start, self.end
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn contains(&self, frame: usize) -> bool {
        (self.start..self.end).contains(&frame)
    }

    pub fn intersection(&self, other: &AnnotatedSegment) -> usize {
        self.end.min(other.end).saturating_sub(self.start.max(other.start))
    }

    pub fn iou(&self, other: &AnnotatedSegment) -> f64 {
        let inter = self.intersection(other);
        let union = self.len() + other.len() - inter;
        inter as f64 / union as f64
    }
}

/// Fraction of frames where `pred` and `gt` agree.
pub fn frame_accuracy(pred: &[bool], gt: &[bool]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::shape(format!(
            "{} predicted frames for {} ground-truth frames",
            pred.len(),
            gt.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::shape("frame accuracy of zero frames"));
    }
    let correct = pred.iter().zip(gt).filter(|(a, b)| a == b).count();
    Ok(correct as f64 / pred.len() as f64)
}

/// Maximal runs of frames with `p >= threshold`, in start order, tagged with `gloss_id`.
pub fn segments_from_frames(p: &[f32], threshold: f32, gloss_id: u32) -> Vec<AnnotatedSegment> {
    let mut out = Vec::new();
    let mut run_start = None;
    for (t, &v) in p.iter().enumerate() {
        match (v >= threshold, run_start) {
            (true, None) => run_start = Some(t),
            (false, Some(s)) => {
                out.push(AnnotatedSegment {
                    gloss_id,
                    start: s,
                    end: t,
                });
                run_start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = run_start {
        out.push(AnnotatedSegment {
            gloss_id,
            start: s,
            end: p.len(),
        });
    }
    out
}

/// Per-frame membership in any of `segments`, for frames `0..len`.
pub fn frames_from_segments(segments: &[AnnotatedSegment], len: usize) -> Vec<bool> {
    let mut out = vec![false; len];
    for s in segments {
        for f in s.start..s.end.min(len) {
            out[f] = true;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl SegmentCounts {
    /// Harmonic mean of precision and recall; 0 when both are 0.
    pub fn f1(&self) -> f64 {
        let precision = ratio(self.tp, self.tp + self.fp);
        let recall = ratio(self.tp, self.tp + self.fn_);
        if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        }
    }
}

impl std::ops::AddAssign for SegmentCounts {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Greedy segment matching at IoU threshold `k` percent.
pub fn match_segments(pred: &[AnnotatedSegment], gt: &[AnnotatedSegment], k: f64) -> Result<SegmentCounts> {
    if !(k > 0.0 && k <= 100.0) {
        return Err(Error::config(format!("overlap threshold {k} outside (0, 100]")));
    }
    for s in pred.iter().chain(gt) {
        s.validate()?;
    }
    let threshold = k / 100.0;
    let mut order: Vec<&AnnotatedSegment> = pred.iter().collect();
    order.sort_by_key(|s| (s.start, s.end));
    let mut used = vec![false; gt.len()];
    let mut counts = SegmentCounts::default();
    for p in order {
        let best = gt
            .iter()
            .enumerate()
            .filter(|(i, _)| !used[*i])
            .map(|(i, g)| (i, p.iou(g)))
            .fold(None, |acc: Option<(usize, f64)>, (i, v)| match acc {
                Some((_, bv)) if bv >= v => acc,
                _ => Some((i, v)),
            });
        match best {
            Some((i, v)) if v >= threshold => {
                used[i] = true;
                counts.tp += 1;
            }
            _ => counts.fp += 1,
        }
    }
    counts.fn_ = used.iter().filter(|u| !**u).count();
    Ok(counts)
}

pub fn f1_at_k(pred: &[AnnotatedSegment], gt: &[AnnotatedSegment], k: f64) -> Result<(f64, SegmentCounts)> {
    let counts = match_segments(pred, gt, k)?;
    Ok((counts.f1(), counts))
}

pub const DEFAULT_KS: [u32; 3] = [25, 50, 75];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc: f64,
    pub f1: BTreeMap<u32, f64>,
    pub counts: BTreeMap<u32, SegmentCounts>,
    pub frames: usize,
}

impl MetricsReport {
    /// `Acc / F1@25 / F1@50 / F1@75` in percent, one decimal.
    pub fn table_row(&self) -> String {
        let mut parts = vec![format!("{:.1}", self.acc * 100.0)];
        parts.extend(self.f1.values().map(|v| format!("{:.1}", v * 100.0)));
        parts.join(" / ")
    }
}

/// One scored unit: per-frame probabilities and the ground-truth segments in
/// the same frame coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredWindow {
    pub probs: Vec<f32>,
    pub gt: Vec<AnnotatedSegment>,
}

/// Frame accuracy pooled over all frames, and F1@k from TP/FP/FN pooled over
/// all windows.
pub fn evaluate(windows: &[ScoredWindow], threshold: f32, ks: &[u32]) -> Result<MetricsReport> {
    let mut correct = 0usize;
    let mut frames = 0usize;
    let mut counts: BTreeMap<u32, SegmentCounts> = ks.iter().map(|&k| (k, SegmentCounts::default())).collect();
    for w in windows {
        let pred_frames: Vec<bool> = w.probs.iter().map(|&p| p >= threshold).collect();
        let gt_frames = frames_from_segments(&w.gt, w.probs.len());
        correct += pred_frames.iter().zip(&gt_frames).filter(|(a, b)| a == b).count();
        frames += pred_frames.len();
        let pred = segments_from_frames(&w.probs, threshold, 0);
        for &k in ks {
            *counts.get_mut(&k).unwrap() += match_segments(&pred, &w.gt, k as f64)?;
        }
    }
    if frames == 0 {
        return Err(Error::shape("nothing to evaluate"));
    }
    Ok(MetricsReport {
        acc: correct as f64 / frames as f64,
        f1: counts.iter().map(|(&k, c)| (k, c.f1())).collect(),
        counts,
        frames,
    })
}
