//! On-disk formats.
//!
//! * Matrices (`.slft`): `"SLFT"`, u32 version, u32 rows, u32 cols, then
//!   `rows * cols` little-endian f32 in row-major order.
//! * Annotations (`.tsv`): `gloss_id<TAB>start<TAB>end` per line, `#` comments.
//! * Predictions (`.csv`): header `frame,probability`, six decimals.
//! * Models (`.slmd`): `"SLMD"`, u32 version, u32 length of a JSON header,
//!   the header, u32 tensor count, then per tensor u32 name length, name,
//!   u32 rank, u32 dims, little-endian f32 data.
//! * Corpora: a directory with `manifest.json` plus `dictionary/`,
//!   `targets/` and `annotations/`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{ExtractorSpec, VideoClip};
use crate::metrics::AnnotatedSegment;
use crate::model::{ModelConfig, SignLookupModel};
use crate::numerics::Tensor;

pub const MATRIX_MAGIC: [u8; 4] = *b"SLFT";
pub const MODEL_MAGIC: [u8; 4] = *b"SLMD";
pub const FORMAT_VERSION: u32 = 1;
pub const MATRIX_HEADER_LEN: usize = 16;
pub const MANIFEST_FILE: &str = "manifest.json";

/// Row-major f32 matrix; unlike [`Tensor`] it may be empty.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows.checked_mul(cols) != Some(data.len()) {
            return Err(Error::shape(format!("{rows}x{cols} matrix with {} values", data.len())));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape() {
            &[r, c] => Matrix::new(r, c, t.data().to_vec()),
            s => Err(Error::shape(format!("expected a matrix, got shape {s:?}"))),
        }
    }

    pub fn into_tensor(self) -> Result<Tensor> {
        Tensor::matrix(self.rows, self.cols, self.data)
    }

    /// Bit-level equality, so NaN payloads and signed zeros count.
    pub fn bit_eq(&self, other: &Matrix) -> bool {
        self.rows == other.rows
            && self.cols == other.cols
            && self.data.iter().zip(&other.data).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(io_err(path))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(io_err(path))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(io_err(path))
}

fn push_u32(out: &mut Vec<u8>, v: usize, what: &str) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::shape(format!("{what} {v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

/// Byte reader that reports the offset of whatever it fails on.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        Reader { bytes, pos: 0, path }
    }

    fn fail(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: self.pos as u64,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let left = self.bytes.len() - self.pos;
        if n > left {
            return Err(self.fail(format!("truncated {what}: need {n} bytes, {left} left")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()) as usize)
    }

    fn magic(&mut self, expected: [u8; 4]) -> Result<()> {
        let start = self.pos;
        let got = self.take(4, "magic")?;
        if got != expected {
            self.pos = start;
            return Err(self.fail(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(&expected)
            )));
        }
        let v = self.u32("version")?;
        if v != FORMAT_VERSION as usize {
            self.pos -= 4;
            return Err(self.fail(format!("unsupported version {v}")));
        }
        Ok(())
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = n
            .checked_mul(4)
            .ok_or_else(|| self.fail(format!("{what} size overflows")))?;
        let start = self.pos;
        let raw = self.take(bytes, what)?;
        let out: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(i) = out.iter().position(|v| !v.is_finite()) {
            self.pos = start + 4 * i;
            return Err(self.fail(format!("non-finite value in {what}")));
        }
        Ok(out)
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.fail(format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

pub fn encode_matrix(m: &Matrix) -> Result<Vec<u8>> {
    if m.rows.checked_mul(m.cols) != Some(m.data.len()) {
        return Err(Error::shape("matrix data does not match its extents"));
    }
    if m.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericInput("matrix to write".into()));
    }
    let mut out = Vec::with_capacity(MATRIX_HEADER_LEN + 4 * m.data.len());
    out.extend_from_slice(&MATRIX_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    push_u32(&mut out, m.rows, "rows")?;
    push_u32(&mut out, m.cols, "cols")?;
    for v in &m.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// `path` only labels errors.
pub fn decode_matrix(bytes: &[u8], path: &Path) -> Result<Matrix> {
    let mut r = Reader::new(bytes, path);
    r.magic(MATRIX_MAGIC)?;
    let rows = r.u32("rows")?;
    let cols = r.u32("cols")?;
    let data = r.f32s(rows * cols, "payload")?;
    r.finish()?;
    Matrix::new(rows, cols, data)
}

pub fn write_matrix(path: &Path, m: &Matrix) -> Result<()> {
    write_bytes(path, &encode_matrix(m)?)
}

pub fn read_matrix(path: &Path) -> Result<Matrix> {
    decode_matrix(&read_bytes(path)?, path)
}

pub fn write_clip(path: &Path, clip: &VideoClip) -> Result<()> {
    write_matrix(path, &Matrix::from_tensor(clip.frames())?)
}

pub fn read_clip(path: &Path) -> Result<VideoClip> {
    let m = read_matrix(path)?;
    if m.rows == 0 || m.cols == 0 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: 8,
            msg: format!("clip needs frames, found {}x{}", m.rows, m.cols),
        });
    }
    VideoClip::new(m.into_tensor()?)
}

/// Parses annotation TSV; `path` only labels errors. Result is sorted by start.
pub fn parse_annotations(text: &str, path: &Path) -> Result<Vec<AnnotatedSegment>> {
    let mut segs: Vec<(usize, AnnotatedSegment)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.trim();
        if body.is_empty() || body.starts_with('#') {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let fields: Vec<&str> = body.split('\t').map(str::trim).collect();
        let [g, s, e] = fields[..] else {
            return Err(parse_err(format!("expected 3 tab-separated fields, found {}", fields.len())));
        };
        let gloss_id = g.parse().map_err(|_| parse_err(format!("bad gloss id {g:?}")))?;
        let start = s.parse().map_err(|_| parse_err(format!("bad start {s:?}")))?;
        let end = e.parse().map_err(|_| parse_err(format!("bad end {e:?}")))?;
        let seg = AnnotatedSegment { gloss_id, start, end };
        seg.validate()
            .map_err(|_| Error::Segment(format!("{}:{line}: start {start} not before end {end}", path.display())))?;
        segs.push((line, seg));
    }
    segs.sort_by_key(|(_, s)| (s.start, s.end));
    for w in segs.windows(2) {
        let ((_, a), (line, b)) = (&w[0], &w[1]);
        if b.start < a.end {
            return Err(Error::Segment(format!(
                "{}:{line}: [{}, {}) overlaps [{}, {})",
                path.display(),
                b.start,
                b.end,
                a.start,
                a.end
            )));
        }
    }
    Ok(segs.into_iter().map(|(_, s)| s).collect())
}

pub fn read_annotations(path: &Path) -> Result<Vec<AnnotatedSegment>> {
    parse_annotations(&read_text(path)?, path)
}

/// Sorted, validated TSV text.
pub fn format_annotations(segments: &[AnnotatedSegment]) -> Result<String> {
    let mut sorted = segments.to_vec();
    sorted.sort_by_key(|s| (s.start, s.end));
    let mut out = String::new();
    for (i, s) in sorted.iter().enumerate() {
        s.validate()?;
        if i > 0 && s.start < sorted[i - 1].end {
            return Err(Error::Segment(format!("[{}, {}) overlaps its predecessor", s.start, s.end)));
        }
        out.push_str(&format!("{}\t{}\t{}\n", s.gloss_id, s.start, s.end));
    }
    Ok(out)
}

pub fn write_annotations(path: &Path, segments: &[AnnotatedSegment]) -> Result<()> {
    write_bytes(path, format_annotations(segments)?.as_bytes())
}

pub const PREDICTIONS_HEADER: &str = "frame,probability";

pub fn format_predictions(probs: &[f32]) -> Result<String> {
    let mut out = String::with_capacity(16 * (probs.len() + 1));
    out.push_str(PREDICTIONS_HEADER);
    out.push('\n');
    for (t, &p) in probs.iter().enumerate() {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::NumericInput(format!("probability {p} at frame {t}")));
        }
        out.push_str(&format!("{t},{p:.6}\n"));
    }
    Ok(out)
}

pub fn write_predictions(path: &Path, probs: &[f32]) -> Result<()> {
    write_bytes(path, format_predictions(probs)?.as_bytes())
}

pub fn parse_predictions(text: &str, path: &Path) -> Result<Vec<f32>> {
    let mut lines = text.lines().enumerate();
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    match lines.next() {
        Some((_, h)) if h.trim() == PREDICTIONS_HEADER => {}
        _ => return Err(parse_err(1, format!("expected header {PREDICTIONS_HEADER:?}"))),
    }
    let mut out = Vec::new();
    for (i, raw) in lines {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let Some((f, p)) = raw.split_once(',') else {
            return Err(parse_err(line, "expected frame,probability".into()));
        };
        let frame: usize = f.trim().parse().map_err(|_| parse_err(line, format!("bad frame {f:?}")))?;
        if frame != out.len() {
            return Err(parse_err(line, format!("frame {frame} out of sequence, expected {}", out.len())));
        }
        let p: f32 = p.trim().parse().map_err(|_| parse_err(line, format!("bad probability {p:?}")))?;
        if !(0.0..=1.0).contains(&p) {
            return Err(parse_err(line, format!("probability {p} outside [0, 1]")));
        }
        out.push(p);
    }
    Ok(out)
}

pub fn read_predictions(path: &Path) -> Result<Vec<f32>> {
    parse_predictions(&read_text(path)?, path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntryKind {
    Dictionary,
    Target,
    Annotation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    /// Relative to the manifest's directory, `/`-separated.
    pub path: String,
    pub kind: EntryKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gloss_id: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub signer_id: Option<u32>,
    /// Absent for dictionary clips, which serve both splits.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    /// Loads `dir/manifest.json` and checks that every listed file exists.
    pub fn load(dir: &Path) -> Result<Manifest> {
        let path = dir.join(MANIFEST_FILE);
        let text = read_text(&path)?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.clone(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        if m.version != FORMAT_VERSION {
            return Err(Error::Corpus(format!("{}: unsupported manifest version {}", path.display(), m.version)));
        }
        for e in &m.entries {
            let p = dir.join(&e.path);
            if !p.is_file() {
                return Err(Error::io(
                    p,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "listed in manifest but missing"),
                ));
            }
        }
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetRecord {
    /// File stem shared by the clip and its annotations.
    pub name: String,
    pub clip: VideoClip,
    pub annotations: Vec<AnnotatedSegment>,
    pub signer: u32,
    pub split: Split,
}

/// Dictionary exemplars keyed by gloss, plus annotated continuous targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub dictionary: BTreeMap<u32, VideoClip>,
    pub dictionary_signer: u32,
    pub targets: Vec<TargetRecord>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &TargetRecord> {
        self.targets.iter().filter(move |t| t.split == split)
    }

    pub fn d_frame(&self) -> Result<usize> {
        self.dictionary
            .values()
            .next()
            .map(VideoClip::d_frame)
            .ok_or_else(|| Error::Corpus("empty dictionary".into()))
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(io_err(path))
}

/// Writes clips, annotations and the manifest; output depends only on `corpus`.
pub fn write_corpus(dir: &Path, corpus: &Corpus) -> Result<Manifest> {
    for sub in ["dictionary", "targets", "annotations"] {
        create_dir(&dir.join(sub))?;
    }
    let mut entries = Vec::new();
    for (&gloss, clip) in &corpus.dictionary {
        let rel = format!("dictionary/g{gloss:04}.slft");
        write_clip(&dir.join(&rel), clip)?;
        entries.push(ManifestEntry {
            path: rel,
            kind: EntryKind::Dictionary,
            gloss_id: Some(gloss),
            signer_id: Some(corpus.dictionary_signer),
            split: None,
        });
    }
    for t in &corpus.targets {
        let clip_rel = format!("targets/{}.slft", t.name);
        let ann_rel = format!("annotations/{}.tsv", t.name);
        write_clip(&dir.join(&clip_rel), &t.clip)?;
        write_annotations(&dir.join(&ann_rel), &t.annotations)?;
        for (path, kind) in [(clip_rel, EntryKind::Target), (ann_rel, EntryKind::Annotation)] {
            entries.push(ManifestEntry {
                path,
                kind,
                gloss_id: None,
                signer_id: Some(t.signer),
                split: Some(t.split),
            });
        }
    }
    let manifest = Manifest {
        version: FORMAT_VERSION,
        entries,
    };
    write_bytes(&dir.join(MANIFEST_FILE), manifest.to_json().as_bytes())?;
    Ok(manifest)
}

fn stem(path: &str) -> &str {
    let file = path.rsplit('/').next().unwrap_or(path);
    file.rsplit_once('.').map_or(file, |(s, _)| s)
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let manifest = Manifest::load(dir)?;
    let mut dictionary = BTreeMap::new();
    let mut dictionary_signer = None;
    let mut annotations: BTreeMap<&str, &ManifestEntry> = BTreeMap::new();
    for e in manifest.entries.iter().filter(|e| e.kind == EntryKind::Annotation) {
        if annotations.insert(stem(&e.path), e).is_some() {
            return Err(Error::Corpus(format!("duplicate annotation file for {}", stem(&e.path))));
        }
    }
    let mut targets = Vec::new();
    for e in &manifest.entries {
        match e.kind {
            EntryKind::Dictionary => {
                let gloss = e
                    .gloss_id
                    .ok_or_else(|| Error::Corpus(format!("dictionary entry {} has no gloss_id", e.path)))?;
                if dictionary.insert(gloss, read_clip(&dir.join(&e.path))?).is_some() {
                    return Err(Error::Corpus(format!("gloss {gloss} listed twice in the dictionary")));
                }
                dictionary_signer = dictionary_signer.or(e.signer_id);
            }
            EntryKind::Target => {
                let name = stem(&e.path);
                let ann = annotations
                    .get(name)
                    .ok_or_else(|| Error::Corpus(format!("target {} has no annotation file", e.path)))?;
                let clip = read_clip(&dir.join(&e.path))?;
                let segs = read_annotations(&dir.join(&ann.path))?;
                if let Some(s) = segs.iter().find(|s| s.end > clip.n_frames()) {
                    return Err(Error::Corpus(format!(
                        "{}: segment [{}, {}) beyond {} frames",
                        ann.path,
                        s.start,
                        s.end,
                        clip.n_frames()
                    )));
                }
                targets.push(TargetRecord {
                    name: name.to_string(),
                    clip,
                    annotations: segs,
                    signer: e.signer_id.unwrap_or(0),
                    split: e
                        .split
                        .ok_or_else(|| Error::Corpus(format!("target {} has no split", e.path)))?,
                });
            }
            EntryKind::Annotation => {}
        }
    }
    if dictionary.is_empty() {
        return Err(Error::Corpus(format!("{}: no dictionary clips", dir.display())));
    }
    Ok(Corpus {
        dictionary,
        dictionary_signer: dictionary_signer.unwrap_or(0),
        targets,
    })
}

/// JSON block at the head of a model file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelHeader {
    pub model: ModelConfig,
    /// The extractor the model was trained against.
    pub extractor: ExtractorSpec,
}

pub fn encode_model(model: &SignLookupModel, extractor: ExtractorSpec) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&ModelHeader {
        model: model.config().clone(),
        extractor,
    })
    .expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(&MODEL_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    push_u32(&mut out, header.len(), "header length")?;
    out.extend_from_slice(&header);
    push_u32(&mut out, model.params().len(), "tensor count")?;
    for (name, t) in model.param_names().iter().zip(model.params()) {
        t.ensure_finite(name)?;
        push_u32(&mut out, name.len(), "name length")?;
        out.extend_from_slice(name.as_bytes());
        push_u32(&mut out, t.shape().len(), "rank")?;
        for &d in t.shape() {
            push_u32(&mut out, d, "extent")?;
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_model(bytes: &[u8], path: &Path) -> Result<(SignLookupModel, ExtractorSpec)> {
    let mut r = Reader::new(bytes, path);
    r.magic(MODEL_MAGIC)?;
    let len = r.u32("header length")?;
    let at = r.pos;
    let header: ModelHeader = serde_json::from_slice(r.take(len, "header")?).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        offset: at as u64,
        msg: format!("header: {e}"),
    })?;
    let count = r.u32("tensor count")?;
    let mut named = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let n = r.u32("name length")?;
        let at = r.pos;
        let name = std::str::from_utf8(r.take(n, "name")?)
            .map_err(|_| Error::Format {
                path: path.to_path_buf(),
                offset: at as u64,
                msg: "tensor name is not UTF-8".into(),
            })?
            .to_string();
        let rank = r.u32("rank")?;
        if rank == 0 || rank > 8 {
            r.pos -= 4;
            return Err(r.fail(format!("tensor {name} has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("extent")?);
        }
        let n: usize = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| r.fail(format!("tensor {name} too large")))?;
        let at = r.pos;
        let data = r.f32s(n, &name)?;
        let t = Tensor::new(shape, data).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            offset: at as u64,
            msg: e.to_string(),
        })?;
        named.push((name, t));
    }
    r.finish()?;
    let model = SignLookupModel::from_parts(header.model, named)?;
    Ok((model, header.extractor))
}

pub fn save_model(path: &Path, model: &SignLookupModel, extractor: ExtractorSpec) -> Result<()> {
    write_bytes(path, &encode_model(model, extractor)?)
}

pub fn load_model(path: &Path) -> Result<(SignLookupModel, ExtractorSpec)> {
    decode_model(&read_bytes(path)?, path)
}
