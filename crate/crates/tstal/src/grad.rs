//! Hand-derived reverse-mode gradients of the base and refinement losses
//! with respect to every model parameter, plus a central finite-difference
//! verification harness.
//!
//! The computation graph is fixed and shallow — conv embedding, two linear
//! heads, six scalar losses — so the chain rule is applied explicitly rather
//! than through an autodiff engine. Subgradient conventions at the kinks:
//!
//! - `d|u|/du = 0` at `u = 0`;
//! - the hinge `max(0, cos - m)` has zero gradient when inactive, including
//!   exactly at the boundary;
//! - the normalization term differentiates only through the selected
//!   bottom-l/top-l attention entries (lowest-index tie-break);
//! - the guide max-pool routes its gradient to the argmax label class
//!   (lowest class index on ties), and never into the attention (the
//!   attention factor is treated as a detached constant);
//! - clamped logs have zero gradient in the clamped region.
//!
//! The finite-difference harness differences the same objective the
//! gradient belongs to — in particular the attention entering the guide
//! term is held frozen at the evaluation point, matching the detach — and
//! resamples test points that sit within `10*h` of any kink, where central
//! differences are invalid.

use ndarray::{Array1, Array2, Array3};
use rand::Rng;

use crate::error::{Error, Result};
use crate::losses::{
    base_loss, guide_targets, loss_cls, loss_dist, loss_guide, loss_norm, loss_pseudo,
    loss_smooth, norm_selection, refine_loss, LossBreakdown, LossWeights, LN_CLAMP,
};
use crate::model::{forward, init_params, BaseModelParams};
use crate::pseudo::PseudoGT;
use crate::seeding;

/// Loss mode: base training (full regularized sum) or refinement training
/// (pseudo-BCE replaces the smooth/norm terms).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Base,
    Refine,
}

/// Gradient of the total loss, shaped like [`BaseModelParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub conv_w: Array3<f64>,
    pub conv_b: Array1<f64>,
    pub attn_w: Array1<f64>,
    pub attn_b: f64,
    pub cls_w: Array2<f64>,
    pub cls_b: Array1<f64>,
}

impl Gradients {
    pub fn zeros(d: usize, e: usize, c: usize) -> Self {
        Gradients {
            conv_w: Array3::zeros((e, d, 3)),
            conv_b: Array1::zeros(e),
            attn_w: Array1::zeros(e),
            attn_b: 0.0,
            cls_w: Array2::zeros((c, e)),
            cls_b: Array1::zeros(c),
        }
    }

    /// Same fixed coordinate order as [`BaseModelParams::flatten`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out =
            Vec::with_capacity(self.conv_w.len() + 2 * self.conv_b.len() + 1 + self.cls_w.len() + self.cls_b.len());
        out.extend(self.conv_w.iter());
        out.extend(self.conv_b.iter());
        out.extend(self.attn_w.iter());
        out.push(self.attn_b);
        out.extend(self.cls_w.iter());
        out.extend(self.cls_b.iter());
        out
    }

    pub fn is_finite(&self) -> bool {
        self.flatten().iter().all(|v| v.is_finite())
    }
}

fn sign0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Derivative of `ln(max(v, LN_CLAMP))`: zero inside the clamped region.
fn clamped_ln_grad(v: f64) -> f64 {
    if v > LN_CLAMP {
        1.0 / v
    } else {
        0.0
    }
}

/// Computes the mode's loss breakdown and the gradient of its total with
/// respect to every parameter. `g` must be present exactly in refine mode.
///
/// The loss value is produced by the same forward/loss code as the losses
/// module, so it matches those functions bitwise.
pub fn backward(
    params: &BaseModelParams,
    features: &Array2<f64>,
    labels: &[usize],
    w: &LossWeights,
    g: Option<&PseudoGT>,
    mode: Mode,
) -> Result<(LossBreakdown, Gradients)> {
    match (mode, g.is_some()) {
        (Mode::Base, true) => {
            return Err(Error::validation("base mode must not receive a pseudo-GT"))
        }
        (Mode::Refine, false) => {
            return Err(Error::validation("refine mode requires a pseudo-GT"))
        }
        _ => {}
    }
    let out = forward(params, features)?;
    let breakdown = match mode {
        Mode::Base => base_loss(&out, labels, w)?,
        Mode::Refine => refine_loss(&out, labels, g.expect("checked above"), w)?,
    };

    let (d, e, c) = params.dims();
    let t = features.dim().0;
    let mut grads = Gradients::zeros(d, e, c);
    // Upstream gradients flowing into the embedded rows and the attention.
    let mut dx = Array2::<f64>::zeros((t, e));
    let mut da = Array1::<f64>::zeros(t);

    // --- classification head: L_cls -> y_hat -> logits -> (cls_w, cls_b, x_fg)
    let mut dy = Array1::<f64>::zeros(c);
    for ci in 0..c {
        let y = if labels.contains(&ci) { 1.0 } else { 0.0 };
        dy[ci] = -(y * clamped_ln_grad(out.y_hat[ci])
            - (1.0 - y) * clamped_ln_grad(1.0 - out.y_hat[ci]))
            / c as f64;
    }
    // Softmax backward: du = y_hat .* (dy - <dy, y_hat>).
    let dot_dy = dy.dot(&out.y_hat);
    let du: Array1<f64> = Array1::from_shape_fn(c, |ci| out.y_hat[ci] * (dy[ci] - dot_dy));
    let mut dx_fg = Array1::<f64>::zeros(e);
    for ci in 0..c {
        grads.cls_b[ci] += du[ci];
        for ei in 0..e {
            grads.cls_w[[ci, ei]] += du[ci] * out.x_fg[ei];
            dx_fg[ei] += du[ci] * params.cls_w[[ci, ei]];
        }
    }

    // --- distinctness hinge: lambda3 * max(0, cos(x_fg, x_bg) - m)
    let mut dx_bg = Array1::<f64>::zeros(e);
    let nf = out.x_fg.dot(&out.x_fg).sqrt();
    let nb = out.x_bg.dot(&out.x_bg).sqrt();
    if nf > 0.0 && nb > 0.0 {
        let cos = out.x_fg.dot(&out.x_bg) / (nf * nb);
        // Hinge active only strictly past the margin (zero subgradient at it).
        if cos - w.m > 0.0 {
            for ei in 0..e {
                dx_fg[ei] += w.lambda3 * (out.x_bg[ei] / nb - cos * out.x_fg[ei] / nf) / nf;
                dx_bg[ei] += w.lambda3 * (out.x_fg[ei] / nf - cos * out.x_bg[ei] / nb) / nb;
            }
        }
    }

    // --- guide loss: lambda4 * mean |sg(a_i) - s*_i|, gradient only through
    // the T-CAM side (the attention is detached), max-pool routed to the
    // argmax label class.
    let targets = guide_targets(&out.tcam, labels);
    for ti in 0..t {
        let (c_star, s_star) = targets[ti];
        let gs = w.lambda4 * (-sign0(out.a[ti] - s_star)) / t as f64;
        if gs == 0.0 {
            continue;
        }
        // Row softmax backward with a single upstream entry at c_star.
        let dot = gs * out.tcam[[ti, c_star]];
        for ci in 0..c {
            let upstream = if ci == c_star { gs } else { 0.0 };
            let dv = out.tcam[[ti, ci]] * (upstream - dot);
            if dv == 0.0 {
                continue;
            }
            grads.cls_b[ci] += dv;
            for ei in 0..e {
                grads.cls_w[[ci, ei]] += dv * out.x[[ti, ei]];
                dx[[ti, ei]] += dv * params.cls_w[[ci, ei]];
            }
        }
    }

    // --- pooling backward: x_fg = sum(a x)/sum(a), x_bg the complement.
    let s_a: f64 = out.a.iter().sum();
    let s_b: f64 = out.a.iter().map(|&ai| 1.0 - ai).sum();
    for ti in 0..t {
        let mut da_fg = 0.0;
        let mut da_bg = 0.0;
        for ei in 0..e {
            dx[[ti, ei]] += out.a[ti] / s_a * dx_fg[ei] + (1.0 - out.a[ti]) / s_b * dx_bg[ei];
            da_fg += dx_fg[ei] * (out.x[[ti, ei]] - out.x_fg[ei]);
            da_bg += dx_bg[ei] * (out.x[[ti, ei]] - out.x_bg[ei]);
        }
        da[ti] += da_fg / s_a - da_bg / s_b;
    }

    // --- attention-shaping terms (direct da contributions).
    match mode {
        Mode::Base => {
            // Smoothness: lambda1 * mean |a_t - a_{t+1}|.
            if t >= 2 {
                let scale = w.lambda1 / (t - 1) as f64;
                for ti in 0..t - 1 {
                    let s = sign0(out.a[ti] - out.a[ti + 1]);
                    da[ti] += scale * s;
                    da[ti + 1] -= scale * s;
                }
            }
            // Normalization: lambda2 * (mean bottom-l - mean top-l); only the
            // selected entries carry gradient.
            let (bottom, top, l) = norm_selection(&out.a, w.k);
            for &i in &bottom {
                da[i] += w.lambda2 / l as f64;
            }
            for &i in &top {
                da[i] -= w.lambda2 / l as f64;
            }
        }
        Mode::Refine => {
            // Pseudo BCE: lambda5 * -(1/T) sum [g ln a + (1-g) ln(1-a)].
            let pg = g.expect("checked above");
            for ti in 0..t {
                let gi = f64::from(pg.g[ti]);
                da[ti] += w.lambda5
                    * (-(gi * clamped_ln_grad(out.a[ti])
                        - (1.0 - gi) * clamped_ln_grad(1.0 - out.a[ti])))
                    / t as f64;
            }
        }
    }

    // --- attention head backward: a = sigmoid(attn_w . x + attn_b).
    for ti in 0..t {
        let dz = da[ti] * out.a[ti] * (1.0 - out.a[ti]);
        if dz == 0.0 {
            continue;
        }
        grads.attn_b += dz;
        for ei in 0..e {
            grads.attn_w[ei] += dz * out.x[[ti, ei]];
            dx[[ti, ei]] += dz * params.attn_w[ei];
        }
    }

    // --- conv backward: x[t] = sum_k conv_w[:,:,k] . F[t+k-1] + conv_b.
    for ti in 0..t {
        for ei in 0..e {
            let up = dx[[ti, ei]];
            if up == 0.0 {
                continue;
            }
            grads.conv_b[ei] += up;
            for ki in 0..3usize {
                let Some(src) = (ti + ki).checked_sub(1) else { continue };
                if src >= t {
                    continue;
                }
                for di in 0..d {
                    grads.conv_w[[ei, di, ki]] += up * features[[src, di]];
                }
            }
        }
    }

    Ok((breakdown, grads))
}

// ---------------------------------------------------------------------------
// Finite-difference verification
// ---------------------------------------------------------------------------

/// Compares `analytic` against central finite differences of `loss` over
/// every parameter coordinate; returns the maximum relative error with
/// denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn fd_max_rel_error(
    params: &BaseModelParams,
    loss: impl Fn(&BaseModelParams) -> f64,
    analytic: &Gradients,
    h: f64,
) -> f64 {
    assert!(h > 0.0, "step size must be positive");
    let (d, e, c) = params.dims();
    let flat = params.flatten();
    let ga = analytic.flatten();
    assert_eq!(flat.len(), ga.len(), "gradient/parameter coordinate mismatch");
    let mut max_rel = 0.0f64;
    let mut probe = flat.clone();
    for i in 0..flat.len() {
        probe[i] = flat[i] + h;
        let lp = loss(&BaseModelParams::from_flat(d, e, c, &probe).expect("same dims"));
        probe[i] = flat[i] - h;
        let lm = loss(&BaseModelParams::from_flat(d, e, c, &probe).expect("same dims"));
        probe[i] = flat[i];
        let numeric = (lp - lm) / (2.0 * h);
        let rel = (numeric - ga[i]).abs() / numeric.abs().max(ga[i].abs()).max(1e-8);
        max_rel = max_rel.max(rel);
    }
    max_rel
}

/// Verifies [`backward`] against central finite differences of the total
/// loss at the given point; returns the max relative error over coordinates.
///
/// The differenced loss mirrors the stop-gradient: the attention entering
/// the guide term stays frozen at its value from the evaluation point, so
/// the finite differences probe exactly the objective whose gradient
/// [`backward`] computes. At the evaluation point itself the frozen total
/// equals the ordinary total.
pub fn grad_check(
    params: &BaseModelParams,
    features: &Array2<f64>,
    labels: &[usize],
    w: &LossWeights,
    g: Option<&PseudoGT>,
    mode: Mode,
    h: f64,
) -> Result<f64> {
    if h <= 0.0 {
        return Err(Error::validation("finite-difference step h must be positive"));
    }
    let (_, analytic) = backward(params, features, labels, w, g, mode)?;
    let a_frozen = forward(params, features)?.a;
    let loss = |p: &BaseModelParams| -> f64 {
        let out = forward(p, features).expect("dims unchanged");
        let cls = loss_cls(&out.y_hat, labels).expect("validated");
        let dist = loss_dist(&out.x_fg, &out.x_bg, w.m);
        let guide = loss_guide(&a_frozen, &out.tcam, labels).expect("validated");
        match mode {
            Mode::Base => {
                cls + w.lambda1 * loss_smooth(&out.a)
                    + w.lambda2 * loss_norm(&out.a, w.k)
                    + w.lambda3 * dist
                    + w.lambda4 * guide
            }
            Mode::Refine => {
                cls + w.lambda3 * dist
                    + w.lambda4 * guide
                    + w.lambda5 * loss_pseudo(&out.a, g.expect("validated")).expect("validated")
            }
        }
    };
    Ok(fd_max_rel_error(params, loss, &analytic, h))
}

// ---------------------------------------------------------------------------
// Kink proximity
// ---------------------------------------------------------------------------

/// Distance of the current point from each family of non-smooth loss
/// features. Finite differences are invalid when any margin is tiny;
/// `f64::INFINITY` marks families that are inactive in the given mode.
#[derive(Clone, Copy, Debug)]
pub struct KinkReport {
    /// min |a_t - a_{t+1}| (smoothness absolute values; base mode).
    pub smooth: f64,
    /// Smallest value gap at the bottom-l / top-l selection boundaries
    /// (base mode).
    pub norm: f64,
    /// |cos(x_fg, x_bg) - m| (hinge boundary).
    pub dist: f64,
    /// min |a_i - s*_i| (guide absolute values).
    pub guide_abs: f64,
    /// Smallest best-vs-second-best gap of label-class T-CAM entries
    /// (guide max-pool; infinity with a single label).
    pub guide_argmax: f64,
    /// Distance of every clamped-log argument from the clamp threshold.
    pub clamp: f64,
}

impl KinkReport {
    pub fn min_margin(&self) -> f64 {
        self.smooth
            .min(self.norm)
            .min(self.dist)
            .min(self.guide_abs)
            .min(self.guide_argmax)
            .min(self.clamp)
    }
}

/// Measures kink proximity for the instance (see [`KinkReport`]).
pub fn kink_report(
    params: &BaseModelParams,
    features: &Array2<f64>,
    labels: &[usize],
    w: &LossWeights,
    mode: Mode,
) -> Result<KinkReport> {
    let out = forward(params, features)?;
    let t = out.a.len();

    let mut smooth = f64::INFINITY;
    let mut norm = f64::INFINITY;
    if mode == Mode::Base {
        for ti in 0..t.saturating_sub(1) {
            smooth = smooth.min((out.a[ti] - out.a[ti + 1]).abs());
        }
        let (_, _, l) = norm_selection(&out.a, w.k);
        if l < t {
            let mut sorted = out.a.to_vec();
            sorted.sort_by(|x, y| x.partial_cmp(y).unwrap());
            norm = (sorted[l] - sorted[l - 1]).min(sorted[t - l] - sorted[t - l - 1]);
        }
    }

    let dist = match crate::losses::cosine(&out.x_fg, &out.x_bg) {
        Some(cos) => (cos - w.m).abs(),
        None => f64::INFINITY,
    };

    let targets = guide_targets(&out.tcam, labels);
    let mut guide_abs = f64::INFINITY;
    let mut guide_argmax = f64::INFINITY;
    let mut sorted_labels: Vec<usize> = labels.to_vec();
    sorted_labels.sort_unstable();
    sorted_labels.dedup();
    for ti in 0..t {
        let (c_star, s_star) = targets[ti];
        guide_abs = guide_abs.min((out.a[ti] - s_star).abs());
        if sorted_labels.len() > 1 {
            let second = sorted_labels
                .iter()
                .filter(|&&cl| cl != c_star)
                .map(|&cl| out.tcam[[ti, cl]])
                .fold(f64::NEG_INFINITY, f64::max);
            guide_argmax = guide_argmax.min(s_star - second);
        }
    }

    let mut clamp = f64::INFINITY;
    for &v in out.y_hat.iter() {
        clamp = clamp.min((v - LN_CLAMP).abs()).min((1.0 - v - LN_CLAMP).abs());
    }
    if mode == Mode::Refine {
        for &ai in out.a.iter() {
            clamp = clamp.min((ai - LN_CLAMP).abs()).min((1.0 - ai - LN_CLAMP).abs());
        }
    }

    Ok(KinkReport { smooth, norm, dist, guide_abs, guide_argmax, clamp })
}

// ---------------------------------------------------------------------------
// Randomized verification sweep (shared by tests and the CLI)
// ---------------------------------------------------------------------------

/// Result of a randomized gradient verification sweep.
#[derive(Clone, Copy, Debug)]
pub struct GradCheckSummary {
    /// Worst relative error over all instances and coordinates.
    pub max_rel_error: f64,
    /// Instances actually checked.
    pub instances: usize,
    /// Sample points discarded for sitting within `10*h` of a kink.
    pub resampled: usize,
    /// Smallest kink margin among the accepted points.
    pub min_kink_margin: f64,
}

/// Runs `trials` finite-difference checks on random instances of shape
/// `(T, D, E, C)`, resampling any point whose kink margin is below `10*h`.
pub fn grad_check_random(
    trials: usize,
    (t, d, e, c): (usize, usize, usize, usize),
    mode: Mode,
    w: &LossWeights,
    h: f64,
    seed: u64,
) -> Result<GradCheckSummary> {
    let mut summary = GradCheckSummary {
        max_rel_error: 0.0,
        instances: 0,
        resampled: 0,
        min_kink_margin: f64::INFINITY,
    };
    let mode_tag = match mode {
        Mode::Base => "base",
        Mode::Refine => "refine",
    };
    for trial in 0..trials {
        let mut accepted = false;
        for attempt in 0..64 {
            let tag = format!("gradcheck/{mode_tag}/{trial}/{attempt}");
            let mut rng = seeding::rng(seed, &tag);
            let params = init_params(d, e, c, seeding::derive_seed(seed, &format!("{tag}/init")));
            let features =
                Array2::from_shape_fn((t, d), |_| rng.random_range(-1.0..1.0));
            let n_labels = rng.random_range(1..=2.min(c));
            let mut labels: Vec<usize> = Vec::new();
            while labels.len() < n_labels {
                let cand = rng.random_range(0..c);
                if !labels.contains(&cand) {
                    labels.push(cand);
                }
            }
            let pseudo = match mode {
                Mode::Base => None,
                Mode::Refine => Some(PseudoGT {
                    g: (0..t).map(|_| rng.random_range(0..=1u8)).collect(),
                    source_iteration: 0,
                }),
            };
            let margin = kink_report(&params, &features, &labels, w, mode)?.min_margin();
            if margin <= 10.0 * h {
                summary.resampled += 1;
                continue;
            }
            let err = grad_check(&params, &features, &labels, w, pseudo.as_ref(), mode, h)?;
            summary.max_rel_error = summary.max_rel_error.max(err);
            summary.min_kink_margin = summary.min_kink_margin.min(margin);
            summary.instances += 1;
            accepted = true;
            break;
        }
        if !accepted {
            return Err(Error::validation(format!(
                "could not sample a kink-free gradient-check instance (trial {trial})"
            )));
        }
    }
    Ok(summary)
}
