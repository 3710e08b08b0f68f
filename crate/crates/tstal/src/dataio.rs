//! Dataset contract and synthetic data generation.
//!
//! A dataset on disk is one `manifest.json` plus two raw feature files per
//! video (RGB and flow). Feature files hold little-endian IEEE-754 `f32`
//! values, row-major `T×D` — trivially parseable from any language and
//! byte-exact under round trips. All in-memory math uses `f64`.
//!
//! Manifest schema:
//!
//! ```json
//! {
//!   "num_classes": 5,
//!   "feature_dim": 20,
//!   "snippet_seconds": 1.0,
//!   "videos": [
//!     {"id": "train_0000", "T": 57, "labels": [2, 4],
//!      "segments": [[3.0, 11.0, 2], [30.0, 38.0, 4]],
//!      "rgb_path": "feat/train_0000_rgb.bin",
//!      "flow_path": "feat/train_0000_flow.bin"}
//!   ]
//! }
//! ```
//!
//! `segments` is optional, holds `[start_s, end_s, class]` triples in
//! seconds, and is read only by evaluation — training sees `labels` alone.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding;

/// Planted-segment length bounds used by the synthetic generator, in
/// snippets. The per-video maximum also caps at T/4 so no single segment
/// dominates a short video.
const SYNTH_SEG_LEN_MIN: usize = 4;
const SYNTH_SEG_LEN_MAX: usize = 12;
/// Minimum background gap between planted segments, in snippets.
const SYNTH_SEG_GAP: usize = 2;

/// One ground-truth segment, serialized as `[start_s, end_s, class]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "(f64, f64, usize)", into = "(f64, f64, usize)")]
pub struct SegmentAnnotation {
    /// Start time in seconds.
    pub start: f64,
    /// End time in seconds (exclusive).
    pub end: f64,
    /// Action class index.
    pub class: usize,
}

impl From<(f64, f64, usize)> for SegmentAnnotation {
    fn from((start, end, class): (f64, f64, usize)) -> Self {
        SegmentAnnotation { start, end, class }
    }
}

impl From<SegmentAnnotation> for (f64, f64, usize) {
    fn from(s: SegmentAnnotation) -> Self {
        (s.start, s.end, s.class)
    }
}

/// Per-video manifest entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoMeta {
    pub id: String,
    /// Number of feature snippets, `T`.
    #[serde(rename = "T")]
    pub num_snippets: usize,
    /// Video-level class labels (the only supervision training sees).
    pub labels: Vec<usize>,
    /// Ground-truth segments for evaluation; never read by training.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segments: Option<Vec<SegmentAnnotation>>,
    /// Feature file paths, relative to the manifest's directory.
    pub rgb_path: String,
    pub flow_path: String,
}

/// Top-level manifest: dataset dimensions plus all video entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub num_classes: usize,
    pub feature_dim: usize,
    /// Wall-clock seconds covered by one snippet (both modalities aligned).
    pub snippet_seconds: f64,
    pub videos: Vec<VideoMeta>,
}

/// One video with both feature matrices loaded.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoRecord {
    pub meta: VideoMeta,
    /// RGB features, `T×D`.
    pub rgb: Array2<f64>,
    /// Flow features, `T×D`.
    pub flow: Array2<f64>,
}

/// A fully loaded dataset; `records` is aligned with `manifest.videos`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub records: Vec<VideoRecord>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Splits off the first `n` videos (e.g. a train/val split where the
    /// generator emits training videos first).
    pub fn split_at(mut self, n: usize) -> (Dataset, Dataset) {
        assert!(n <= self.records.len(), "split point past end of dataset");
        let tail_videos = self.manifest.videos.split_off(n);
        let tail_records = self.records.split_off(n);
        let tail = Dataset {
            manifest: DatasetManifest { videos: tail_videos, ..self.manifest.clone() },
            records: tail_records,
        };
        (self, tail)
    }
}

/// Synthetic dataset configuration. Training videos are generated first,
/// then validation videos, with ids `train_NNNN` / `val_NNNN`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_train: usize,
    pub num_val: usize,
    pub num_classes: usize,
    pub feature_dim: usize,
    /// Inclusive bounds on snippets per video.
    pub t_range: (usize, usize),
    /// Inclusive bounds on planted segments per video.
    pub segments_per_video: (usize, usize),
    /// Stddev of the isotropic Gaussian noise on background snippets.
    pub background_noise_sigma: f64,
    /// Stddev of the noise on in-segment snippets; `None` reuses
    /// `background_noise_sigma`. A quiet foreground over a loud background
    /// makes pooled-feature classification degrade unless the attention
    /// actually suppresses background, which keeps the classification loss
    /// coupled to attention throughout training.
    pub segment_noise_sigma: Option<f64>,
    /// Exact minimum pairwise distance between class mean vectors.
    pub class_separation: f64,
    /// L2 norm of a dataset-wide background mean vector (one random
    /// direction per modality, shared by all videos). 0 keeps the
    /// background centered at zero; a positive value gives background real
    /// feature mass that carries no class information, so separating it
    /// requires learned attention rather than feature magnitude alone.
    pub background_shift: f64,
    pub snippet_seconds: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_train: 200,
            num_val: 50,
            num_classes: 5,
            feature_dim: 20,
            t_range: (40, 80),
            segments_per_video: (1, 3),
            background_noise_sigma: 0.4,
            segment_noise_sigma: None,
            class_separation: 6.0,
            background_shift: 1.5,
            snippet_seconds: 1.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if self.num_train == 0 || self.num_val == 0 {
            return Err(Error::validation("num_train and num_val must be positive"));
        }
        if self.num_classes == 0 || self.feature_dim == 0 {
            return Err(Error::validation("num_classes and feature_dim must be positive"));
        }
        let (t_lo, t_hi) = self.t_range;
        if t_lo < 4 {
            return Err(Error::validation("t_range lower bound must be at least 4"));
        }
        if t_lo > t_hi {
            return Err(Error::validation("t_range must satisfy lo <= hi"));
        }
        let (s_lo, s_hi) = self.segments_per_video;
        if s_lo == 0 || s_lo > s_hi {
            return Err(Error::validation("segments_per_video must satisfy 1 <= lo <= hi"));
        }
        if !(self.background_noise_sigma > 0.0) {
            return Err(Error::validation("background_noise_sigma must be positive"));
        }
        if let Some(s) = self.segment_noise_sigma {
            if !(s > 0.0) {
                return Err(Error::validation("segment_noise_sigma must be positive"));
            }
        }
        if !(self.class_separation > 0.0) {
            return Err(Error::validation("class_separation must be positive"));
        }
        if !(self.background_shift >= 0.0) || !self.background_shift.is_finite() {
            return Err(Error::validation("background_shift must be finite and non-negative"));
        }
        if !(self.snippet_seconds > 0.0) {
            return Err(Error::validation("snippet_seconds must be positive"));
        }
        // Worst-case fit: the most and longest segments, with mandatory gaps,
        // must fit in the shortest allowed video.
        let worst = s_hi * max_segment_len(t_lo) + SYNTH_SEG_GAP * (s_hi - 1);
        if worst > t_lo {
            return Err(Error::validation(format!(
                "infeasible config: up to {s_hi} segments cannot fit in a video of {t_lo} snippets"
            )));
        }
        Ok(())
    }
}

fn max_segment_len(t: usize) -> usize {
    SYNTH_SEG_LEN_MAX.min(SYNTH_SEG_LEN_MIN.max(t / 4))
}

// ---------------------------------------------------------------------------
// Validation and loading
// ---------------------------------------------------------------------------

fn validate_manifest(m: &DatasetManifest) -> Result<()> {
    if m.num_classes == 0 {
        return Err(Error::validation("manifest num_classes must be positive"));
    }
    if m.feature_dim == 0 {
        return Err(Error::validation("manifest feature_dim must be positive"));
    }
    if !(m.snippet_seconds > 0.0) || !m.snippet_seconds.is_finite() {
        return Err(Error::validation("manifest snippet_seconds must be a positive real"));
    }
    let mut seen = BTreeSet::new();
    for v in &m.videos {
        if !seen.insert(v.id.as_str()) {
            return Err(Error::validation(format!("duplicate video id '{}'", v.id)));
        }
        if v.num_snippets == 0 {
            return Err(Error::validation(format!("video '{}': T must be positive", v.id)));
        }
        for &l in &v.labels {
            if l >= m.num_classes {
                return Err(Error::validation(format!(
                    "video '{}': label {l} out of range [0, {})",
                    v.id, m.num_classes
                )));
            }
        }
        if let Some(segs) = &v.segments {
            let duration = v.num_snippets as f64 * m.snippet_seconds;
            for s in segs {
                if !(0.0 <= s.start && s.start < s.end && s.end <= duration) {
                    return Err(Error::validation(format!(
                        "video '{}': segment [{}, {}] outside [0, {duration}] or degenerate",
                        v.id, s.start, s.end
                    )));
                }
                if s.class >= m.num_classes {
                    return Err(Error::validation(format!(
                        "video '{}': segment class {} out of range [0, {})",
                        v.id, s.class, m.num_classes
                    )));
                }
            }
        }
    }
    Ok(())
}

fn read_feature_matrix(
    path: &Path,
    t: usize,
    d: usize,
    video_id: &str,
    modality: &str,
) -> Result<Array2<f64>> {
    let bytes = fs::read(path).map_err(|e| {
        Error::validation(format!(
            "video '{video_id}': missing or unreadable {modality} feature file {}: {e}",
            path.display()
        ))
    })?;
    let expect = t * d * 4;
    if bytes.len() != expect {
        return Err(Error::validation(format!(
            "video '{video_id}': {modality} feature file {} has {} bytes, expected {expect} (T={t} x D={d} x 4)",
            path.display(),
            bytes.len()
        )));
    }
    let mut m = Array2::zeros((t, d));
    for (i, chunk) in bytes.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
        if !v.is_finite() {
            return Err(Error::validation(format!(
                "video '{video_id}': non-finite value at element {i} of {modality} features"
            )));
        }
        m[[i / d, i % d]] = v;
    }
    Ok(m)
}

/// Loads and validates a manifest without touching the feature files it
/// references (enough for evaluation, which needs only the annotations).
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    validate_manifest(&manifest)?;
    Ok(manifest)
}

/// Loads a manifest and all referenced feature files. Record order equals
/// manifest order. Every failure names the offending video.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let manifest = load_manifest(manifest_path)?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let d = manifest.feature_dim;
    let records = manifest
        .videos
        .iter()
        .map(|meta| {
            let t = meta.num_snippets;
            let rgb = read_feature_matrix(&base.join(&meta.rgb_path), t, d, &meta.id, "rgb")?;
            let flow =
                read_feature_matrix(&base.join(&meta.flow_path), t, d, &meta.id, "flow")?;
            Ok(VideoRecord { meta: meta.clone(), rgb, flow })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { manifest, records })
}

fn feature_bytes(m: &Array2<f64>) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(m.len() * 4);
    for &v in m.iter() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    bytes
}

/// Writes `dir/manifest.json` plus all feature files. Round-trips bitwise:
/// `load_dataset` on the result reproduces `dataset` exactly (feature values
/// are kept f32-representable by the generator and by loading).
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest_path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&dataset.manifest).expect("manifest serializes");
    fs::write(&manifest_path, json + "\n").map_err(|e| Error::io(&manifest_path, e))?;
    for rec in &dataset.records {
        for (rel, matrix) in [(&rec.meta.rgb_path, &rec.rgb), (&rec.meta.flow_path, &rec.flow)] {
            let path = dir.join(rel);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            fs::write(&path, feature_bytes(matrix)).map_err(|e| Error::io(&path, e))?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Synthetic generation
// ---------------------------------------------------------------------------

/// Draws per-class mean vectors and rescales them so the minimum pairwise
/// distance equals `separation` exactly. A single class is scaled to norm
/// `separation` instead (separated from the zero background).
fn class_means<R: Rng>(rng: &mut R, c: usize, d: usize, separation: f64) -> Result<Vec<Vec<f64>>> {
    let mut means: Vec<Vec<f64>> =
        (0..c).map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect()).collect();
    let scale = if c == 1 {
        let norm = means[0].iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::validation("degenerate class mean draw (zero vector)"));
        }
        separation / norm
    } else {
        let mut min_dist = f64::INFINITY;
        for i in 0..c {
            for j in (i + 1)..c {
                let dist = means[i]
                    .iter()
                    .zip(&means[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                min_dist = min_dist.min(dist);
            }
        }
        if min_dist == 0.0 {
            return Err(Error::validation("degenerate class mean draw (coincident means)"));
        }
        separation / min_dist
    };
    for mean in &mut means {
        for v in mean {
            *v *= scale;
        }
    }
    Ok(means)
}

/// Plants `lengths` non-overlapping segments (with >= SYNTH_SEG_GAP snippets
/// between them) into a video of `t` snippets, distributing the slack
/// uniformly at random among the gaps. Returns `[start, end)` snippet ranges.
fn place_segments<R: Rng>(rng: &mut R, t: usize, lengths: &[usize]) -> Vec<(usize, usize)> {
    let n = lengths.len();
    let needed: usize = lengths.iter().sum::<usize>() + SYNTH_SEG_GAP * (n - 1);
    debug_assert!(needed <= t, "validated by SynthConfig::validate");
    let mut gaps = vec![0usize; n + 1];
    for _ in 0..(t - needed) {
        gaps[rng.random_range(0..n + 1)] += 1;
    }
    let mut out = Vec::with_capacity(n);
    let mut cursor = gaps[0];
    for (j, &len) in lengths.iter().enumerate() {
        out.push((cursor, cursor + len));
        cursor += len + gaps[j + 1];
        if j + 1 < n {
            cursor += SYNTH_SEG_GAP;
        }
    }
    out
}

/// Draws the shared background mean with exact L2 norm `shift`; `None`
/// (consuming no RNG draws, so zero-shift streams are unchanged) when the
/// shift is zero.
fn background_mean<R: Rng>(rng: &mut R, d: usize, shift: f64) -> Result<Option<Vec<f64>>> {
    if shift == 0.0 {
        return Ok(None);
    }
    let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::validation("degenerate background mean draw (zero vector)"));
    }
    Ok(Some(v.into_iter().map(|x| x * shift / norm).collect()))
}

/// Pushes one snippet row: class mean (or background mean) plus Gaussian
/// noise, rounded through f32 so disk round trips are bitwise exact.
fn sample_row<R: Rng>(rng: &mut R, mean: Option<&[f64]>, sigma: f64, d: usize, out: &mut Vec<f64>) {
    for i in 0..d {
        let base = mean.map_or(0.0, |m| m[i]);
        let noise: f64 = rng.sample(StandardNormal);
        out.push((base + sigma * noise) as f32 as f64);
    }
}

/// Generates a synthetic dataset with planted, annotated action segments.
///
/// Snippets inside a class-`c` segment are drawn around that class's mean
/// vector; background snippets around a dataset-wide class-free mean of
/// norm `background_shift`; both with isotropic noise. RGB and flow use
/// independently drawn means, so the modalities carry complementary
/// evidence and fusion is genuinely informative. Deterministic given
/// `cfg.seed`.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = seeding::rng(cfg.seed, "synth");
    let (c, d) = (cfg.num_classes, cfg.feature_dim);
    let means_rgb = class_means(&mut rng, c, d, cfg.class_separation)?;
    let means_flow = class_means(&mut rng, c, d, cfg.class_separation)?;
    // One class-free background direction per modality, shared by the whole
    // dataset: a "camera bias" that carries feature mass but no label
    // information. Attention has to learn to suppress it, while the
    // classifier gains nothing from it.
    let bg_rgb = background_mean(&mut rng, d, cfg.background_shift)?;
    let bg_flow = background_mean(&mut rng, d, cfg.background_shift)?;

    let mut videos = Vec::new();
    let mut records = Vec::new();
    let splits = [("train", cfg.num_train), ("val", cfg.num_val)];
    for (split, count) in splits {
        for i in 0..count {
            let id = format!("{split}_{i:04}");
            let t = rng.random_range(cfg.t_range.0..=cfg.t_range.1);
            let n_seg = rng.random_range(cfg.segments_per_video.0..=cfg.segments_per_video.1);
            let lengths: Vec<usize> = (0..n_seg)
                .map(|_| rng.random_range(SYNTH_SEG_LEN_MIN..=max_segment_len(t)))
                .collect();
            let spans = place_segments(&mut rng, t, &lengths);
            let classes: Vec<usize> = (0..n_seg).map(|_| rng.random_range(0..c)).collect();

            // Snippet -> class map for feature synthesis.
            let mut snippet_class = vec![None; t];
            for (&(s, e), &cls) in spans.iter().zip(&classes) {
                for slot in &mut snippet_class[s..e] {
                    *slot = Some(cls);
                }
            }
            let seg_sigma = cfg.segment_noise_sigma.unwrap_or(cfg.background_noise_sigma);
            let sigma_of = |sc: Option<usize>| {
                if sc.is_some() {
                    seg_sigma
                } else {
                    cfg.background_noise_sigma
                }
            };
            let mut rgb = Vec::with_capacity(t * d);
            for &sc in &snippet_class {
                let mean = sc.map(|cls| means_rgb[cls].as_slice()).or(bg_rgb.as_deref());
                sample_row(&mut rng, mean, sigma_of(sc), d, &mut rgb);
            }
            let mut flow = Vec::with_capacity(t * d);
            for &sc in &snippet_class {
                let mean = sc.map(|cls| means_flow[cls].as_slice()).or(bg_flow.as_deref());
                sample_row(&mut rng, mean, sigma_of(sc), d, &mut flow);
            }

            let labels: Vec<usize> =
                classes.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
            let segments = spans
                .iter()
                .zip(&classes)
                .map(|(&(s, e), &cls)| SegmentAnnotation {
                    start: s as f64 * cfg.snippet_seconds,
                    end: e as f64 * cfg.snippet_seconds,
                    class: cls,
                })
                .collect();
            let meta = VideoMeta {
                id: id.clone(),
                num_snippets: t,
                labels,
                segments: Some(segments),
                rgb_path: format!("feat/{id}_rgb.bin"),
                flow_path: format!("feat/{id}_flow.bin"),
            };
            videos.push(meta.clone());
            records.push(VideoRecord {
                meta,
                rgb: Array2::from_shape_vec((t, d), rgb).expect("row count matches"),
                flow: Array2::from_shape_vec((t, d), flow).expect("row count matches"),
            });
        }
    }

    Ok(Dataset {
        manifest: DatasetManifest {
            num_classes: c,
            feature_dim: d,
            snippet_seconds: cfg.snippet_seconds,
            videos,
        },
        records,
    })
}
