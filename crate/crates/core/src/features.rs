//! Query and target feature streams.
//!
//! A query clip becomes `M` features, one per temporal stride `2^(m-1)`, each
//! taken from 16 frames sampled around the clip's middle frame. A target clip
//! becomes one feature per frame from a centered 16-frame sliding window.
//! Out-of-range frame indices clamp to the nearest edge.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{xavier_init, RngState, Tensor};

/// Frames consumed by one extractor call.
pub const WINDOW: usize = 16;
/// Position of the center frame inside a window.
pub const WINDOW_CENTER: usize = 8;

/// Frames of a clip, one `d_frame` vector per row.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    frames: Tensor,
    pub frame_rate: f32,
}

impl VideoClip {
    pub fn new(frames: Tensor) -> Result<Self> {
        if frames.shape().len() != 2 {
            return Err(Error::shape("clip frames must be a matrix"));
        }
        frames.ensure_finite("clip frames")?;
        Ok(VideoClip {
            frames,
            frame_rate: 25.0,
        })
    }

    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        Self::new(Tensor::from_rows(rows)?)
    }

    pub fn n_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn d_frame(&self) -> usize {
        self.frames.cols()
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        self.frames.row(i)
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    /// Stacks the frames at `indices` into one flat `indices.len() x d_frame` buffer.
    pub fn gather(&self, indices: &[usize]) -> Vec<f32> {
        let mut out = Vec::with_capacity(indices.len() * self.d_frame());
        for &i in indices {
            out.extend_from_slice(self.frame(i));
        }
        out
    }
}

/// The `M x d_feat` multi-stride query features.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveQueryFeatures {
    pub x: Tensor,
    pub strides: Vec<usize>,
}

/// One feature row per target frame.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetFeatureSequence {
    pub y: Tensor,
}

impl TargetFeatureSequence {
    pub fn len(&self) -> usize {
        self.y.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rows `start..start + len`, clamping indices past the end to the last row.
    pub fn window(&self, start: usize, len: usize) -> TargetFeatureSequence {
        let last = self.len() - 1;
        let rows: Vec<&[f32]> = (start..start + len).map(|t| self.y.row(t.min(last))).collect();
        TargetFeatureSequence {
            y: Tensor::from_rows(&rows).expect("non-empty window"),
        }
    }
}

/// Maps a 16-frame window to a fixed-width feature vector.
pub trait FeatureExtractor: Send + Sync {
    fn d_frame(&self) -> usize;
    fn d_feat(&self) -> usize;

    /// `window` is `16 x d_frame`, row-major.
    fn extract(&self, window: &[f32]) -> Vec<f32>;

    /// Extracts many windows at once; `windows` is `n x (16 * d_frame)`.
    fn extract_batch(&self, windows: &[f32], n: usize) -> Vec<f32> {
        let w = WINDOW * self.d_frame();
        (0..n)
            .flat_map(|i| self.extract(&windows[i * w..(i + 1) * w]))
            .collect()
    }
}

/// Stride `2^(m-1)` for level `m` (1-based).
pub fn stride_for_level(m: usize) -> usize {
    1 << (m - 1)
}

/// The 16 frame indices of level `m` around `center`:
/// `clamp(center + 2^(m-1) * (k - 8), 0, n_frames - 1)` for `k = 0..16`.
pub fn adaptive_indices(center: usize, m: usize, n_frames: usize) -> Result<[usize; WINDOW]> {
    if center >= n_frames {
        return Err(Error::Bounds {
            index: center,
            len: n_frames,
        });
    }
    if m == 0 || m > 32 {
        return Err(Error::config(format!("level {m} outside 1..=32")));
    }
    let stride = stride_for_level(m) as i64;
    let mut out = [0usize; WINDOW];
    for (k, slot) in out.iter_mut().enumerate() {
        let i = center as i64 + stride * (k as i64 - WINDOW_CENTER as i64);
        *slot = i.clamp(0, n_frames as i64 - 1) as usize;
    }
    Ok(out)
}

/// Indices of the centered window `t - 8 ..= t + 7`, clamped.
pub fn target_window_indices(t: usize, n_frames: usize) -> [usize; WINDOW] {
    let mut out = [0usize; WINDOW];
    for (j, slot) in out.iter_mut().enumerate() {
        let i = t as i64 + j as i64 - WINDOW_CENTER as i64;
        *slot = i.clamp(0, n_frames as i64 - 1) as usize;
    }
    out
}

fn check_extractor(clip: &VideoClip, ex: &dyn FeatureExtractor) -> Result<()> {
    if clip.d_frame() != ex.d_frame() {
        return Err(Error::shape(format!(
            "clip frames have width {}, extractor expects {}",
            clip.d_frame(),
            ex.d_frame()
        )));
    }
    Ok(())
}

pub fn extract_adaptive_query(
    clip: &VideoClip,
    ex: &dyn FeatureExtractor,
    levels: usize,
) -> Result<AdaptiveQueryFeatures> {
    check_extractor(clip, ex)?;
    if levels == 0 {
        return Err(Error::config("need at least one query level"));
    }
    let n = clip.n_frames();
    let center = n / 2;
    let mut windows = Vec::with_capacity(levels * WINDOW * clip.d_frame());
    for m in 1..=levels {
        windows.extend(clip.gather(&adaptive_indices(center, m, n)?));
    }
    let x = Tensor::matrix(levels, ex.d_feat(), ex.extract_batch(&windows, levels))?;
    Ok(AdaptiveQueryFeatures {
        x,
        strides: (1..=levels).map(stride_for_level).collect(),
    })
}

pub fn extract_target_sequence(clip: &VideoClip, ex: &dyn FeatureExtractor) -> Result<TargetFeatureSequence> {
    check_extractor(clip, ex)?;
    let n = clip.n_frames();
    let mut windows = Vec::with_capacity(n * WINDOW * clip.d_frame());
    for t in 0..n {
        windows.extend(clip.gather(&target_window_indices(t, n)));
    }
    let y = Tensor::matrix(n, ex.d_feat(), ex.extract_batch(&windows, n))?;
    Ok(TargetFeatureSequence { y })
}

/// Parameters that fully determine a [`ProjectionExtractor`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractorSpec {
    pub d_frame: usize,
    pub d_feat: usize,
    pub seed: u64,
}

/// Fixed random projection of the flattened window followed by `tanh`.
#[derive(Debug, Clone)]
pub struct ProjectionExtractor {
    spec: ExtractorSpec,
    /// `(16 * d_frame) x d_feat`.
    weights: Tensor,
}

impl ProjectionExtractor {
    pub fn spec(&self) -> ExtractorSpec {
        self.spec
    }
}

const EXTRACTOR_STREAM: u64 = 0x5eed_f3a7;

pub fn projection_extractor(d_frame: usize, d_feat: usize, seed: u64) -> Result<ProjectionExtractor> {
    if d_frame == 0 || d_feat == 0 {
        return Err(Error::config("extractor dimensions must be positive"));
    }
    let mut rng = RngState::new(seed, EXTRACTOR_STREAM).rng();
    Ok(ProjectionExtractor {
        spec: ExtractorSpec {
            d_frame,
            d_feat,
            seed,
        },
        weights: xavier_init(WINDOW * d_frame, d_feat, &mut rng),
    })
}

impl From<ExtractorSpec> for ProjectionExtractor {
    fn from(s: ExtractorSpec) -> Self {
        projection_extractor(s.d_frame, s.d_feat, s.seed).expect("validated extractor spec")
    }
}

impl FeatureExtractor for ProjectionExtractor {
    fn d_frame(&self) -> usize {
        self.spec.d_frame
    }

    fn d_feat(&self) -> usize {
        self.spec.d_feat
    }

    fn extract(&self, window: &[f32]) -> Vec<f32> {
        self.extract_batch(window, 1)
    }

    fn extract_batch(&self, windows: &[f32], n: usize) -> Vec<f32> {
        let k = WINDOW * self.spec.d_frame;
        assert_eq!(windows.len(), n * k, "window buffer size");
        let d = self.spec.d_feat;
        let w = self.weights.data();
        let mut out = vec![0.0f32; n * d];
        for (row, o) in windows.chunks(k).zip(out.chunks_mut(d)) {
            for (&xv, wrow) in row.iter().zip(w.chunks(d)) {
                if xv != 0.0 {
                    for (ov, &wv) in o.iter_mut().zip(wrow) {
                        *ov += xv * wv;
                    }
                }
            }
            for v in o.iter_mut() {
                *v = v.tanh();
            }
        }
        out
    }
}
