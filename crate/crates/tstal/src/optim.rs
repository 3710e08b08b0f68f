//! AdamW optimization, the two-stream training schedule with pseudo-label
//! refinement, parameter-space EMA ensembling, and checkpoint file IO.
//!
//! Training runs one optimizer step per video (variable-length sequences
//! make batching pointless here), shuffles the video order each epoch with
//! a seeded PRNG, and is bitwise deterministic given the config seed. Each
//! refinement iteration regenerates the pseudo ground truth once — in
//! inference mode, over unshuffled manifest order — freezes it for the
//! whole iteration, warm-starts the parameters from the previous iteration,
//! and resets the optimizer state (the objective changes, so stale moments
//! would be meaningless).

use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{Dataset, VideoRecord};
use crate::error::{Error, Result};
use crate::grad::{backward, Gradients, Mode};
use crate::losses::{LossBreakdown, LossWeights};
use crate::model::{
    forward, init_params, params_from_bytes, params_to_bytes, BaseModelParams,
};
use crate::pseudo::{fuse, make_pseudo_gt, PseudoGT};
use crate::seeding;

/// EMA ensembling weight given to each successive checkpoint.
pub const EMA_WEIGHT: f64 = 0.2;

/// The two input modalities. Each stream owns an independent model and
/// optimizer; they meet only at attention fusion.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Rgb,
    Flow,
}

impl Stream {
    pub fn as_str(self) -> &'static str {
        match self {
            Stream::Rgb => "rgb",
            Stream::Flow => "flow",
        }
    }
}

/// First/second-moment accumulators of AdamW over the flattened parameter
/// coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step_count: u64,
}

impl AdamWState {
    pub fn new(coords: usize) -> Self {
        AdamWState { m: vec![0.0; coords], v: vec![0.0; coords], step_count: 0 }
    }
}

/// Full training schedule configuration. JSON-loadable; every field has a
/// default, so a config file only needs the overrides.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Fixed AdamW learning rate.
    pub lr: f64,
    /// AdamW moment decay rates.
    pub betas: (f64, f64),
    pub eps: f64,
    /// Decoupled weight-decay coefficient.
    pub weight_decay: f64,
    pub epochs_per_iteration: usize,
    /// Total number of refinement iterations, counting iteration 0.
    pub refinement_iterations: usize,
    pub loss_weights: LossWeights,
    /// Convex fusion weight on the RGB stream for pseudo-GT generation.
    pub beta_fuse: f64,
    /// Fused-attention threshold for pseudo-GT generation.
    pub theta: f64,
    /// Embedding width E; `None` keeps the feature dimension (E = D).
    pub embed_dim: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-4,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.01,
            epochs_per_iteration: 10,
            refinement_iterations: 5,
            loss_weights: LossWeights::default(),
            beta_fuse: 0.6,
            theta: 0.5,
            embed_dim: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::validation("lr must be positive"));
        }
        let (b1, b2) = self.betas;
        if !(0.0 < b1 && b1 < 1.0 && 0.0 < b2 && b2 < 1.0) {
            return Err(Error::validation("betas must lie strictly in (0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::validation("eps must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::validation("weight_decay must be non-negative"));
        }
        if self.refinement_iterations < 1 {
            return Err(Error::validation("refinement_iterations must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.beta_fuse) {
            return Err(Error::validation("beta_fuse must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(Error::validation("theta must lie in [0, 1]"));
        }
        if self.embed_dim == Some(0) {
            return Err(Error::validation("embed_dim must be positive"));
        }
        if self.loss_weights.k == 0 {
            return Err(Error::validation("loss_weights.k must be positive"));
        }
        Ok(())
    }
}

/// Both streams' parameters after one refinement iteration (or their EMA).
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub rgb: BaseModelParams,
    pub flow: BaseModelParams,
    pub refinement_iteration: usize,
    /// True for the EMA of several iterations rather than a single one.
    pub ensemble: bool,
}

/// One training-log record; serializes to a JSON line per optimizer step.
#[derive(Serialize)]
pub struct TrainLogEntry<'a> {
    pub iteration: usize,
    pub epoch: usize,
    pub video_id: &'a str,
    pub stream: &'a str,
    pub loss: &'a LossBreakdown,
}

/// Per-step observer for training progress (e.g. a JSON-lines writer).
pub type LogSink<'a> = dyn FnMut(&TrainLogEntry) + 'a;

/// One AdamW update. Moments and parameters are treated as flat coordinate
/// vectors in the documented field order. The decoupled decay is applied as
/// the multiplicative factor `(1 - lr*weight_decay)`, so a zero-gradient
/// step shrinks parameters by exactly that factor.
pub fn adamw_step(
    params: &BaseModelParams,
    grads: &Gradients,
    state: &mut AdamWState,
    cfg: &TrainConfig,
) -> Result<BaseModelParams> {
    let (d, e, c) = params.dims();
    let p = params.flatten();
    let g = grads.flatten();
    if p.len() != g.len() || p.len() != state.m.len() || p.len() != state.v.len() {
        return Err(Error::validation(format!(
            "optimizer shape mismatch: {} params, {} gradient coords, {} moment coords",
            p.len(),
            g.len(),
            state.m.len()
        )));
    }
    let (b1, b2) = cfg.betas;
    state.step_count += 1;
    let bc1 = 1.0 - b1.powi(state.step_count as i32);
    let bc2 = 1.0 - b2.powi(state.step_count as i32);
    let decay = 1.0 - cfg.lr * cfg.weight_decay;
    let mut out = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g[i];
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g[i] * g[i];
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        out.push(p[i] * decay - cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps));
    }
    BaseModelParams::from_flat(d, e, c, &out)
}

fn stream_features(rec: &VideoRecord, stream: Stream) -> &ndarray::Array2<f64> {
    match stream {
        Stream::Rgb => &rec.rgb,
        Stream::Flow => &rec.flow,
    }
}

/// Trains one stream for `epochs_per_iteration` epochs with a fresh
/// optimizer, one step per video, order reshuffled each epoch from the
/// seed. `pseudo` (parallel to `records`) switches the objective to the
/// refinement loss. Pure in everything except the log sink.
pub fn train_stream(
    records: &[VideoRecord],
    params: BaseModelParams,
    stream: Stream,
    iteration: usize,
    pseudo: Option<&[PseudoGT]>,
    cfg: &TrainConfig,
    log: &mut LogSink,
) -> Result<BaseModelParams> {
    if let Some(ps) = pseudo {
        if ps.len() != records.len() {
            return Err(Error::validation(format!(
                "pseudo-GT count {} does not match video count {}",
                ps.len(),
                records.len()
            )));
        }
    }
    let mode = if pseudo.is_some() { Mode::Refine } else { Mode::Base };
    let mut params = params;
    let mut state = AdamWState::new(params.coord_count());
    for epoch in 0..cfg.epochs_per_iteration {
        let mut order: Vec<usize> = (0..records.len()).collect();
        let tag = format!("train/{}/iter{}/epoch{}", stream.as_str(), iteration, epoch);
        order.shuffle(&mut seeding::rng(cfg.seed, &tag));
        for vi in order {
            let rec = &records[vi];
            let (breakdown, grads) = backward(
                &params,
                stream_features(rec, stream),
                &rec.meta.labels,
                &cfg.loss_weights,
                pseudo.map(|ps| &ps[vi]),
                mode,
            )?;
            if !breakdown.total.is_finite() || !grads.is_finite() {
                return Err(Error::validation(format!(
                    "non-finite loss or gradient at iteration {iteration}, epoch {epoch}, \
                     stream {}, video {} (total = {})",
                    stream.as_str(),
                    rec.meta.id,
                    breakdown.total
                )));
            }
            params = adamw_step(&params, &grads, &mut state, cfg)?;
            log(&TrainLogEntry {
                iteration,
                epoch,
                video_id: &rec.meta.id,
                stream: stream.as_str(),
                loss: &breakdown,
            });
        }
    }
    Ok(params)
}

/// Base training (refinement iteration 0): initializes both streams and
/// trains them independently from video-level labels alone.
pub fn train_base(dataset: &Dataset, cfg: &TrainConfig, log: &mut LogSink) -> Result<Checkpoint> {
    cfg.validate()?;
    if dataset.records.is_empty() {
        return Err(Error::validation("cannot train on an empty dataset"));
    }
    let d = dataset.manifest.feature_dim;
    let c = dataset.manifest.num_classes;
    let e = cfg.embed_dim.unwrap_or(d);
    let rgb0 = init_params(d, e, c, seeding::derive_seed(cfg.seed, "init/rgb"));
    let flow0 = init_params(d, e, c, seeding::derive_seed(cfg.seed, "init/flow"));
    let rgb = train_stream(&dataset.records, rgb0, Stream::Rgb, 0, None, cfg, log)?;
    let flow = train_stream(&dataset.records, flow0, Stream::Flow, 0, None, cfg, log)?;
    Ok(Checkpoint { rgb, flow, refinement_iteration: 0, ensemble: false })
}

/// Generates the pseudo ground truth for every video from the fused
/// two-stream attention of the given parameters — inference only, in
/// manifest order. Videos fan out across the rayon pool; the collected
/// order is the input order, so the result is worker-count independent.
pub fn compute_pseudo_gt(
    records: &[VideoRecord],
    rgb: &BaseModelParams,
    flow: &BaseModelParams,
    cfg: &TrainConfig,
    source_iteration: usize,
) -> Result<Vec<PseudoGT>> {
    records
        .par_iter()
        .map(|rec| {
            let a_rgb = forward(rgb, &rec.rgb)?.a;
            let a_flow = forward(flow, &rec.flow)?.a;
            let fused = fuse(&a_rgb, &a_flow, cfg.beta_fuse)?;
            let slice = fused.as_slice().expect("contiguous attention");
            Ok(make_pseudo_gt(slice, cfg.theta, source_iteration))
        })
        .collect()
}

/// Runs refinement iterations 1..N-1 on top of `ckpt0` and returns all
/// checkpoints, `ckpt0` first. Each iteration: regenerate and freeze the
/// pseudo ground truth from the previous iteration's parameters (one fused
/// source shared by both streams), then train both streams with the
/// refinement loss, warm-started, with fresh optimizer state.
pub fn refine_loop(
    dataset: &Dataset,
    ckpt0: Checkpoint,
    cfg: &TrainConfig,
    log: &mut LogSink,
) -> Result<Vec<Checkpoint>> {
    cfg.validate()?;
    let mut ckpts = vec![ckpt0];
    for iteration in 1..cfg.refinement_iterations {
        let prev = ckpts.last().expect("starts non-empty");
        let pseudo = compute_pseudo_gt(
            &dataset.records,
            &prev.rgb,
            &prev.flow,
            cfg,
            prev.refinement_iteration,
        )?;
        let rgb = train_stream(
            &dataset.records,
            prev.rgb.clone(),
            Stream::Rgb,
            iteration,
            Some(&pseudo),
            cfg,
            log,
        )?;
        let flow = train_stream(
            &dataset.records,
            prev.flow.clone(),
            Stream::Flow,
            iteration,
            Some(&pseudo),
            cfg,
            log,
        )?;
        ckpts.push(Checkpoint { rgb, flow, refinement_iteration: iteration, ensemble: false });
    }
    Ok(ckpts)
}

/// Convenience wrapper: base training, the refinement loop, and the EMA
/// ensemble of all iterations, in one call.
pub fn train_full(
    dataset: &Dataset,
    cfg: &TrainConfig,
    log: &mut LogSink,
) -> Result<(Vec<Checkpoint>, Checkpoint)> {
    let ckpt0 = train_base(dataset, cfg, log)?;
    let ckpts = refine_loop(dataset, ckpt0, cfg, log)?;
    let ensemble = ema_ensemble(&ckpts, EMA_WEIGHT)?;
    Ok((ckpts, ensemble))
}

fn ema_fold(flats: Vec<Vec<f64>>, weight: f64) -> Vec<f64> {
    let mut iter = flats.into_iter();
    let mut acc = iter.next().expect("non-empty checked by caller");
    for next in iter {
        for (a, n) in acc.iter_mut().zip(&next) {
            // Incremental form a + w*(n - a): an exact fixed point when all
            // inputs coincide, unlike (1-w)*a + w*n under rounding.
            *a += weight * (n - *a);
        }
    }
    acc
}

/// Exponential moving average of the checkpoints' parameters in order:
/// `acc <- params(0); acc <- (1-weight)*acc + weight*params(n)` per stream.
/// The result carries the last constituent's iteration number and is
/// tagged as an ensemble.
pub fn ema_ensemble(checkpoints: &[Checkpoint], weight: f64) -> Result<Checkpoint> {
    if checkpoints.is_empty() {
        return Err(Error::validation("cannot ensemble zero checkpoints"));
    }
    if !(weight > 0.0 && weight <= 1.0) {
        return Err(Error::validation("ensemble weight must lie in (0, 1]"));
    }
    let dims_rgb = checkpoints[0].rgb.dims();
    let dims_flow = checkpoints[0].flow.dims();
    for ck in checkpoints {
        if ck.rgb.dims() != dims_rgb || ck.flow.dims() != dims_flow {
            return Err(Error::validation(format!(
                "checkpoint dimension mismatch: iteration {} differs from iteration {}",
                ck.refinement_iteration, checkpoints[0].refinement_iteration
            )));
        }
    }
    let rgb_flat = ema_fold(checkpoints.iter().map(|ck| ck.rgb.flatten()).collect(), weight);
    let flow_flat = ema_fold(checkpoints.iter().map(|ck| ck.flow.flatten()).collect(), weight);
    let (d, e, c) = dims_rgb;
    let (fd, fe, fc) = dims_flow;
    Ok(Checkpoint {
        rgb: BaseModelParams::from_flat(d, e, c, &rgb_flat)?,
        flow: BaseModelParams::from_flat(fd, fe, fc, &flow_flat)?,
        refinement_iteration: checkpoints.last().expect("non-empty").refinement_iteration,
        ensemble: true,
    })
}

// ---------------------------------------------------------------------------
// Checkpoint files
// ---------------------------------------------------------------------------

const CHECKPOINT_FORMAT: &str = "tstal-checkpoint-v1";

#[derive(Serialize, Deserialize)]
struct StreamHeader {
    stream: String,
    d: usize,
    e: usize,
    c: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    refinement_iteration: usize,
    ensemble: bool,
    streams: Vec<StreamHeader>,
}

fn stream_header(stream: Stream, p: &BaseModelParams) -> StreamHeader {
    let (d, e, c) = p.dims();
    StreamHeader { stream: stream.as_str().to_string(), d, e, c }
}

/// Writes a checkpoint file: one JSON header line (format tag, iteration,
/// ensemble flag, per-stream dims), then the RGB and flow parameter blobs
/// as little-endian f64 in the documented order.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.to_string(),
        refinement_iteration: ckpt.refinement_iteration,
        ensemble: ckpt.ensemble,
        streams: vec![
            stream_header(Stream::Rgb, &ckpt.rgb),
            stream_header(Stream::Flow, &ckpt.flow),
        ],
    };
    let mut bytes = serde_json::to_vec(&header).map_err(|e| Error::json(path, e))?;
    bytes.push(b'\n');
    bytes.extend_from_slice(&params_to_bytes(&ckpt.rgb));
    bytes.extend_from_slice(&params_to_bytes(&ckpt.flow));
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads a checkpoint file written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::validation(format!("{}: missing checkpoint header", path.display())))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[..newline]).map_err(|e| Error::json(path, e))?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(Error::validation(format!(
            "{}: unsupported checkpoint format {:?}",
            path.display(),
            header.format
        )));
    }
    let names: Vec<&str> = header.streams.iter().map(|s| s.stream.as_str()).collect();
    if names != ["rgb", "flow"] {
        return Err(Error::validation(format!(
            "{}: expected streams [rgb, flow], found {names:?}",
            path.display()
        )));
    }
    let mut offset = newline + 1;
    let mut params = Vec::with_capacity(2);
    for sh in &header.streams {
        let coords = sh.e * sh.d * 3 + sh.e + sh.e + 1 + sh.c * sh.e + sh.c;
        let len = coords * 8;
        let end = offset
            .checked_add(len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| {
                Error::validation(format!(
                    "{}: checkpoint truncated (stream {})",
                    path.display(),
                    sh.stream
                ))
            })?;
        params.push(params_from_bytes(sh.d, sh.e, sh.c, &bytes[offset..end])?);
        offset = end;
    }
    if offset != bytes.len() {
        return Err(Error::validation(format!(
            "{}: {} trailing bytes after parameter blobs",
            path.display(),
            bytes.len() - offset
        )));
    }
    let flow = params.pop().expect("two streams");
    let rgb = params.pop().expect("two streams");
    Ok(Checkpoint {
        rgb,
        flow,
        refinement_iteration: header.refinement_iteration,
        ensemble: header.ensemble,
    })
}

/// Conventional checkpoint file name for a refinement iteration.
pub fn checkpoint_file_name(ckpt: &Checkpoint) -> String {
    if ckpt.ensemble {
        "ckpt_ensemble.bin".to_string()
    } else {
        format!("ckpt_iter{}.bin", ckpt.refinement_iteration)
    }
}
