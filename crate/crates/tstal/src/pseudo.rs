//! Two-stream fusion and binary pseudo-ground-truth generation.
//!
//! Fusion is the convex combination `beta * rgb + (1 - beta) * flow`, applied
//! identically to attention vectors, T-CAMs, and video-level predictions.
//! The pseudo-GT thresholds the *fused* attention: `g_i = 1` iff
//! `a_fuse,i > theta` (the boundary value goes to 0). Training in refinement
//! iterations treats the frozen pseudo-GT as snippet-level supervision.

use ndarray::{Array, Dimension};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Binary per-snippet pseudo supervision for one video.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoGT {
    /// Entries in {0, 1}, length T.
    pub g: Vec<u8>,
    /// Refinement iteration whose model generated this sequence.
    pub source_iteration: usize,
}

/// Fusion constants: `beta` weighs RGB against flow; `theta` is the
/// pseudo-GT attention threshold.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub beta: f64,
    pub theta: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig { beta: 0.6, theta: 0.5 }
    }
}

/// Elementwise convex combination of two equally-shaped arrays
/// (attention vectors, T-CAMs, or prediction vectors alike).
pub fn fuse<D: Dimension>(
    rgb: &Array<f64, D>,
    flow: &Array<f64, D>,
    beta: f64,
) -> Result<Array<f64, D>> {
    if rgb.shape() != flow.shape() {
        return Err(Error::validation(format!(
            "fuse shape mismatch: {:?} vs {:?}",
            rgb.shape(),
            flow.shape()
        )));
    }
    Ok(rgb * beta + &(flow * (1.0 - beta)))
}

/// Thresholds a fused attention sequence into a binary pseudo-GT:
/// 1 where `a > theta`, 0 otherwise (boundary inclusive to 0).
pub fn make_pseudo_gt(a_fuse: &[f64], theta: f64, source_iteration: usize) -> PseudoGT {
    PseudoGT {
        g: a_fuse.iter().map(|&a| u8::from(a > theta)).collect(),
        source_iteration,
    }
}
