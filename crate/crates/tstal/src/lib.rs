//! Two-stream weakly-supervised temporal action localization.
//!
//! The crate trains per-snippet attention models for two feature modalities
//! (RGB appearance and optical-flow motion) from video-level labels only,
//! sharpens them through iterative pseudo-ground-truth refinement, ensembles
//! the refinement checkpoints by exponential moving average, and localizes
//! actions by thresholding the fused attention into scored temporal
//! detections, evaluated with detection mAP over temporal IoU thresholds.
//!
//! Pipeline stages map to modules:
//!
//! - [`dataio`] — dataset manifest + raw feature-file contract, synthetic data
//! - [`model`] — one stream's forward pass (conv embedding, attention, classifier, T-CAM)
//! - [`losses`] — scalar training losses and weighted combinations
//! - [`grad`] — hand-derived reverse-mode gradients + finite-difference checks
//! - [`optim`] — AdamW, training loops, refinement schedule, EMA ensembling
//! - [`pseudo`] — two-stream fusion and binary pseudo-ground-truth
//! - [`localize`] — upsampling, proposal sweep, scoring, NMS, detections JSON
//! - [`eval`] — temporal IoU, per-class AP, mAP report
//! - [`cli`] — the `tstal` binary's subcommands
//!
//! All numerics run in `f64`; feature files store `f32`. Every stage is
//! deterministic given a seed.

pub mod cli;
pub mod config;
pub mod dataio;
pub mod error;
pub mod eval;
pub mod grad;
pub mod localize;
pub mod losses;
pub mod model;
pub mod optim;
pub mod pseudo;
pub mod seeding;

pub use error::{Error, Result};
