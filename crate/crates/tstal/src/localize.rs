//! Test-time localization: attention/T-CAM fusion, linear upsampling,
//! top-k class selection, threshold-sweep proposal generation, contrast
//! scoring, class-wise NMS, and the detections file format.
//!
//! Intervals are half-open `[t_s, t_e)` on the upsampled grid, so interval
//! length and the scoring denominators are exact position counts. Grid
//! positions convert to seconds via `snippet_seconds / upsample_factor`.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::eval::temporal_iou;
use crate::model::{forward, StreamOutput};
use crate::optim::Checkpoint;
use crate::pseudo::fuse;

/// A candidate temporal interval with a class, prior to NMS. Positions are
/// on the upsampled grid; `[t_s, t_e)` is half-open.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Proposal {
    pub t_s: f64,
    pub t_e: f64,
    pub class: usize,
    /// Lowest sweep threshold that produced this interval.
    pub threshold_of_origin: f64,
}

/// A scored localization in seconds.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub video_id: String,
    pub class: usize,
    /// Segment boundaries in seconds, start < end.
    pub start: f64,
    pub end: f64,
    /// Contrast score of the proposal.
    pub score: f64,
}

/// Localization parameters. JSON-loadable with per-field defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LocalizeConfig {
    /// Temporal upsampling factor for attention and T-CAM.
    pub upsample_factor: usize,
    /// Number of video-level classes localized per video.
    pub top_k_classes: usize,
    pub threshold_start: f64,
    pub threshold_end: f64,
    pub threshold_step: f64,
    /// Same-class suppression threshold on temporal IoU.
    pub nms_iou: f64,
    /// Convex fusion weight on the RGB stream.
    pub beta: f64,
}

impl Default for LocalizeConfig {
    fn default() -> Self {
        LocalizeConfig {
            upsample_factor: 8,
            top_k_classes: 2,
            threshold_start: 0.0,
            threshold_end: 1.0,
            threshold_step: 0.025,
            nms_iou: 0.6,
            beta: 0.6,
        }
    }
}

impl LocalizeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.upsample_factor < 1 {
            return Err(Error::validation("upsample_factor must be at least 1"));
        }
        if self.top_k_classes < 1 {
            return Err(Error::validation("top_k_classes must be at least 1"));
        }
        if !(self.threshold_step > 0.0) {
            return Err(Error::validation("threshold_step must be positive"));
        }
        if self.threshold_start > self.threshold_end {
            return Err(Error::validation("threshold_start must not exceed threshold_end"));
        }
        if !(0.0..=1.0).contains(&self.nms_iou) {
            return Err(Error::validation("nms_iou must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::validation("beta must lie in [0, 1]"));
        }
        Ok(())
    }

    /// The swept thresholds: `start, start+step, …` up to and including
    /// `end` (within a tiny tolerance for the division).
    pub fn thresholds(&self) -> Vec<f64> {
        let n = ((self.threshold_end - self.threshold_start) / self.threshold_step + 1e-9).floor()
            as usize
            + 1;
        (0..n).map(|j| self.threshold_start + j as f64 * self.threshold_step).collect()
    }
}

/// Endpoint-preserving piecewise-linear upsampling to length
/// `(T-1)*factor + 1`; output sample `j` interpolates source position
/// `j / factor`. Exact on constants.
pub fn upsample_linear(seq: &Array1<f64>, factor: usize) -> Array1<f64> {
    let t = seq.len();
    if t == 0 || factor <= 1 {
        return seq.clone();
    }
    let len = (t - 1) * factor + 1;
    Array1::from_shape_fn(len, |j| {
        let i0 = j / factor;
        let rem = j % factor;
        if rem == 0 {
            seq[i0]
        } else {
            let frac = rem as f64 / factor as f64;
            seq[i0] + frac * (seq[i0 + 1] - seq[i0])
        }
    })
}

/// Columnwise [`upsample_linear`] for a T×C matrix.
pub fn upsample_columns(mat: &Array2<f64>, factor: usize) -> Array2<f64> {
    let (t, c) = mat.dim();
    if t == 0 || factor <= 1 {
        return mat.clone();
    }
    let len = (t - 1) * factor + 1;
    Array2::from_shape_fn((len, c), |(j, ci)| {
        let i0 = j / factor;
        let rem = j % factor;
        if rem == 0 {
            mat[[i0, ci]]
        } else {
            let frac = rem as f64 / factor as f64;
            mat[[i0, ci]] + frac * (mat[[i0 + 1, ci]] - mat[[i0, ci]])
        }
    })
}

/// Indices of the `k` largest entries, descending by value, lowest index
/// first on ties.
pub fn top_classes(y_fuse: &Array1<f64>, k: usize) -> Result<Vec<usize>> {
    if k > y_fuse.len() {
        return Err(Error::validation(format!(
            "cannot select top {k} of {} classes",
            y_fuse.len()
        )));
    }
    let mut order: Vec<usize> = (0..y_fuse.len()).collect();
    order.sort_by(|&i, &j| {
        y_fuse[j].partial_cmp(&y_fuse[i]).expect("finite scores").then(i.cmp(&j))
    });
    order.truncate(k);
    Ok(order)
}

/// Maximal runs of consecutive positions with `a > tau`, as half-open
/// `[start, end+1)` intervals.
pub fn runs_above(a_up: &Array1<f64>, tau: f64) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    for (i, &v) in a_up.iter().enumerate() {
        match (v > tau, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                out.push((s, i));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s, a_up.len()));
    }
    out
}

/// Sweeps every configured threshold over the upsampled attention and
/// collects the distinct intervals, each tagged with the lowest threshold
/// that produced it. Sorted by (start, end).
pub fn sweep_proposals(a_up: &Array1<f64>, cfg: &LocalizeConfig) -> Vec<(usize, usize, f64)> {
    let mut seen: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for tau in cfg.thresholds() {
        for run in runs_above(a_up, tau) {
            seen.entry(run).or_insert(tau);
        }
    }
    seen.into_iter().map(|((s, e), tau)| (s, e, tau)).collect()
}

fn round_half_away(v: f64) -> f64 {
    // f64::round rounds half-way cases away from zero.
    v.round()
}

/// Contrast-of-means score over an explicit weight sequence: mean of `w`
/// inside `[t_s, t_e)` minus mean of `w` over the inflated outer margins
/// `[t_s - L/4, t_s) ∪ [t_e, t_e + L/4)` with `L = t_e - t_s`; margin
/// boundaries are rounded half-away-from-zero and clamped to the grid, and
/// an empty margin contributes 0.
pub fn score_contrast(w: &Array1<f64>, t_s: f64, t_e: f64) -> f64 {
    let t_up = w.len();
    let l = t_e - t_s;
    let clamp = |v: f64| round_half_away(v).clamp(0.0, t_up as f64) as usize;
    let (is, ie) = (clamp(t_s), clamp(t_e));
    let (os, oe) = (clamp(t_s - l / 4.0), clamp(t_e + l / 4.0));
    let inner: Vec<f64> = (is..ie).map(|i| w[i]).collect();
    if inner.is_empty() {
        return 0.0;
    }
    let inner_mean = inner.iter().sum::<f64>() / inner.len() as f64;
    let outer: Vec<f64> = (os..is).chain(ie..oe).map(|i| w[i]).collect();
    if outer.is_empty() {
        inner_mean
    } else {
        inner_mean - outer.iter().sum::<f64>() / outer.len() as f64
    }
}

/// Scores a proposal on the fused upsampled attention and T-CAM: the
/// weight sequence is `w_i = a_i * s_{i,c}` for the proposal's class.
pub fn score_proposal(
    p: &Proposal,
    a_fuse_up: &Array1<f64>,
    tcam_fuse_up: &Array2<f64>,
) -> Result<f64> {
    let t_up = a_fuse_up.len();
    if tcam_fuse_up.dim().0 != t_up {
        return Err(Error::validation("attention/T-CAM length mismatch"));
    }
    if p.class >= tcam_fuse_up.dim().1 {
        return Err(Error::validation(format!("proposal class {} out of range", p.class)));
    }
    if !(0.0 <= p.t_s && p.t_s < p.t_e && p.t_e <= t_up as f64) {
        return Err(Error::validation(format!(
            "proposal [{}, {}) out of bounds for grid length {t_up}",
            p.t_s, p.t_e
        )));
    }
    let w = Array1::from_shape_fn(t_up, |i| a_fuse_up[i] * tcam_fuse_up[[i, p.class]]);
    Ok(score_contrast(&w, p.t_s, p.t_e))
}

/// Greedy class-wise non-maximum suppression. Detections are visited in
/// order of descending score (ties: earlier start, lower class, then video
/// id); one is kept iff its temporal IoU with every already-kept detection
/// of the same video and class is at most `iou_thr`. Output keeps the
/// visit order.
pub fn nms(dets: Vec<Detection>, iou_thr: f64) -> Vec<Detection> {
    let mut sorted = dets;
    sorted.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .expect("finite scores")
            .then(a.start.partial_cmp(&b.start).expect("finite starts"))
            .then(a.class.cmp(&b.class))
            .then(a.video_id.cmp(&b.video_id))
    });
    let mut kept: Vec<Detection> = Vec::new();
    for det in sorted {
        let suppressed = kept.iter().any(|k| {
            k.class == det.class
                && k.video_id == det.video_id
                && temporal_iou((k.start, k.end), (det.start, det.end)) > iou_thr
        });
        if !suppressed {
            kept.push(det);
        }
    }
    kept
}

/// Full localization for one video from its two stream outputs: fuse,
/// upsample, select classes, sweep, score, convert to seconds, suppress.
pub fn localize_video(
    rgb_out: &StreamOutput,
    flow_out: &StreamOutput,
    cfg: &LocalizeConfig,
    snippet_seconds: f64,
    video_id: &str,
) -> Result<Vec<Detection>> {
    cfg.validate()?;
    if !(snippet_seconds > 0.0) {
        return Err(Error::validation("snippet_seconds must be positive"));
    }
    let y_fuse = fuse(&rgb_out.y_hat, &flow_out.y_hat, cfg.beta)?;
    let a_fuse = fuse(&rgb_out.a, &flow_out.a, cfg.beta)?;
    let tcam_fuse = fuse(&rgb_out.tcam, &flow_out.tcam, cfg.beta)?;
    let a_up = upsample_linear(&a_fuse, cfg.upsample_factor);
    let tcam_up = upsample_columns(&tcam_fuse, cfg.upsample_factor);
    let classes = top_classes(&y_fuse, cfg.top_k_classes)?;
    let seconds_per_step = snippet_seconds / cfg.upsample_factor as f64;
    let mut dets = Vec::new();
    for (s, e, tau) in sweep_proposals(&a_up, cfg) {
        for &class in &classes {
            let p = Proposal {
                t_s: s as f64,
                t_e: e as f64,
                class,
                threshold_of_origin: tau,
            };
            let score = score_proposal(&p, &a_up, &tcam_up)?;
            dets.push(Detection {
                video_id: video_id.to_string(),
                class,
                start: p.t_s * seconds_per_step,
                end: p.t_e * seconds_per_step,
                score,
            });
        }
    }
    Ok(nms(dets, cfg.nms_iou))
}

/// Localizes every video in the dataset with the checkpoint's two streams.
/// Videos fan out across the rayon pool; results keep manifest order.
pub fn localize_dataset(
    dataset: &Dataset,
    ckpt: &Checkpoint,
    cfg: &LocalizeConfig,
) -> Result<Vec<Detection>> {
    let per_video: Vec<Vec<Detection>> = dataset
        .records
        .par_iter()
        .map(|rec| {
            let rgb_out = forward(&ckpt.rgb, &rec.rgb)?;
            let flow_out = forward(&ckpt.flow, &rec.flow)?;
            localize_video(&rgb_out, &flow_out, cfg, dataset.manifest.snippet_seconds, &rec.meta.id)
        })
        .collect::<Result<_>>()?;
    Ok(per_video.into_iter().flatten().collect())
}

// ---------------------------------------------------------------------------
// Detections file format
// ---------------------------------------------------------------------------

const DETECTIONS_VERSION: &str = "tstal-detections-v1";

#[derive(Serialize, Deserialize)]
struct DetectionJson {
    label: String,
    score: f64,
    segment: (f64, f64),
}

#[derive(Serialize, Deserialize)]
struct DetectionsFile {
    version: String,
    results: BTreeMap<String, Vec<DetectionJson>>,
}

fn class_label(class: usize, label_map: Option<&[String]>) -> Result<String> {
    match label_map {
        Some(names) => names.get(class).cloned().ok_or_else(|| {
            Error::validation(format!("class {class} outside label map of {} names", names.len()))
        }),
        None => Ok(class.to_string()),
    }
}

fn class_of_label(label: &str, label_map: Option<&[String]>) -> Result<usize> {
    match label_map {
        Some(names) => names
            .iter()
            .position(|n| n == label)
            .ok_or_else(|| Error::validation(format!("unknown class label {label:?}"))),
        None => label
            .parse()
            .map_err(|_| Error::validation(format!("non-numeric class label {label:?}"))),
    }
}

/// Writes detections as pretty JSON, videos sorted by id:
/// `{"version": …, "results": {video_id: [{"label", "score", "segment"}]}}`.
/// Class labels come from `label_map` when given, else stringified indices.
pub fn write_detections(
    dets: &[Detection],
    label_map: Option<&[String]>,
    path: &Path,
) -> Result<()> {
    let mut results: BTreeMap<String, Vec<DetectionJson>> = BTreeMap::new();
    for det in dets {
        results.entry(det.video_id.clone()).or_default().push(DetectionJson {
            label: class_label(det.class, label_map)?,
            score: det.score,
            segment: (det.start, det.end),
        });
    }
    let file = DetectionsFile { version: DETECTIONS_VERSION.to_string(), results };
    let mut body = serde_json::to_vec_pretty(&file).map_err(|e| Error::json(path, e))?;
    body.push(b'\n');
    let mut out = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    out.write_all(&body).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads a detections file written by [`write_detections`], mapping labels
/// back to class indices.
pub fn read_detections(path: &Path, label_map: Option<&[String]>) -> Result<Vec<Detection>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let file: DetectionsFile = serde_json::from_slice(&bytes).map_err(|e| Error::json(path, e))?;
    let mut out = Vec::new();
    for (video_id, dets) in file.results {
        for dj in dets {
            let (start, end) = dj.segment;
            if !(start < end) || !dj.score.is_finite() {
                return Err(Error::validation(format!(
                    "invalid detection for video {video_id}: segment [{start}, {end}], score {}",
                    dj.score
                )));
            }
            out.push(Detection {
                video_id: video_id.clone(),
                class: class_of_label(&dj.label, label_map)?,
                start,
                end,
                score: dj.score,
            });
        }
    }
    Ok(out)
}
