//! Scalar training losses and their weighted combinations.
//!
//! Base training (no pseudo-GT):
//! `total = L_cls + l1*L_smooth + l2*L_norm + l3*L_dist + l4*L_guide`.
//! Refinement training swaps the attention-shaping terms for the pseudo BCE:
//! `total = L_cls + l3*L_dist + l4*L_guide + l5*L_pseudo`.
//!
//! All functions are pure; the matching gradients live in [`crate::grad`]
//! and share the selection/tie-break conventions defined here.

use ndarray::{Array1, Array2};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::StreamOutput;
use crate::pseudo::PseudoGT;

/// Lower clamp applied inside every `ln` of the cross-entropy losses, so
/// saturated probabilities cannot produce infinities.
pub(crate) const LN_CLAMP: f64 = 1e-12;

pub(crate) fn clamped_ln(v: f64) -> f64 {
    v.max(LN_CLAMP).ln()
}

/// Loss weights and the constants of the attention-shaping terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Smoothness term weight.
    pub lambda1: f64,
    /// Attention-normalization term weight.
    pub lambda2: f64,
    /// Distinctness term weight.
    pub lambda3: f64,
    /// Guide term weight.
    pub lambda4: f64,
    /// Pseudo-BCE term weight (refinement only).
    pub lambda5: f64,
    /// Extremes divisor for the normalization term: l = max(1, floor(T/k)).
    pub k: usize,
    /// Cosine margin of the distinctness term.
    pub m: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 0.1,
            lambda2: 0.1,
            lambda3: 0.1,
            lambda4: 0.1,
            lambda5: 0.01,
            k: 8,
            m: 0.5,
        }
    }
}

/// Per-term values and the weighted total actually optimized. Optional terms
/// are absent in the mode that does not use them. Serializes to one JSON line
/// per (epoch, video) in the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub cls: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub smooth: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub norm: Option<f64>,
    pub dist: f64,
    pub guide: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pseudo: Option<f64>,
    pub total: f64,
}

fn check_labels(labels: &[usize], c: usize) -> Result<()> {
    if labels.is_empty() {
        return Err(Error::validation("empty label set"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::validation(format!("label {bad} out of range [0, {c})")));
    }
    Ok(())
}

/// Video-level classification loss: binary cross entropy of the softmax
/// probabilities against the multi-hot label vector, averaged over classes.
pub fn loss_cls(y_hat: &Array1<f64>, labels: &[usize]) -> Result<f64> {
    let c = y_hat.len();
    check_labels(labels, c)?;
    let mut sum = 0.0;
    for ci in 0..c {
        let y = if labels.contains(&ci) { 1.0 } else { 0.0 };
        sum += y * clamped_ln(y_hat[ci]) + (1.0 - y) * clamped_ln(1.0 - y_hat[ci]);
    }
    Ok(-sum / c as f64)
}

/// Mean absolute difference of consecutive attention values; 0 for T=1.
pub fn loss_smooth(a: &Array1<f64>) -> f64 {
    let t = a.len();
    if t < 2 {
        return 0.0;
    }
    let sum: f64 = (0..t - 1).map(|i| (a[i] - a[i + 1]).abs()).sum();
    sum / (t - 1) as f64
}

/// Index sets of the `l` smallest and `l` largest attention values, with
/// `l = max(1, floor(T/k))` and lowest-index tie-breaks. Both sets come back
/// sorted by index so sums are order-deterministic (and cancel exactly when
/// the sets coincide, e.g. k=1). Shared with the gradient code so both sides
/// select identically.
pub(crate) fn norm_selection(a: &Array1<f64>, k: usize) -> (Vec<usize>, Vec<usize>, usize) {
    let t = a.len();
    let l = (t / k).max(1);
    let mut by_value: Vec<usize> = (0..t).collect();
    // Ascending by value; ties keep the lower index first.
    by_value.sort_by(|&i, &j| a[i].partial_cmp(&a[j]).unwrap().then(i.cmp(&j)));
    let mut bottom = by_value[..l.min(t)].to_vec();
    let mut desc: Vec<usize> = (0..t).collect();
    desc.sort_by(|&i, &j| a[j].partial_cmp(&a[i]).unwrap().then(i.cmp(&j)));
    let mut top = desc[..l.min(t)].to_vec();
    bottom.sort_unstable();
    top.sort_unstable();
    (bottom, top, l)
}

/// Attention normalization: mean of the `l` smallest minus mean of the `l`
/// largest attention values (always <= 0; minimizing pushes attention toward
/// a bimodal 0/1 profile).
pub fn loss_norm(a: &Array1<f64>, k: usize) -> f64 {
    assert!(k > 0, "k must be positive");
    if a.is_empty() {
        return 0.0;
    }
    let (bottom, top, l) = norm_selection(a, k);
    let lo: f64 = bottom.iter().map(|&i| a[i]).sum::<f64>() / l as f64;
    let hi: f64 = top.iter().map(|&i| a[i]).sum::<f64>() / l as f64;
    lo - hi
}

pub(crate) fn cosine(u: &Array1<f64>, v: &Array1<f64>) -> Option<f64> {
    let nu = u.dot(u).sqrt();
    let nv = v.dot(v).sqrt();
    if nu == 0.0 || nv == 0.0 {
        return None;
    }
    Some(u.dot(v) / (nu * nv))
}

/// Foreground/background distinctness: hinge on the cosine similarity,
/// `max(0, cos(x_fg, x_bg) - m)`. Returns 0 for a zero vector (cosine
/// undefined; degenerate and practically unreachable).
pub fn loss_dist(x_fg: &Array1<f64>, x_bg: &Array1<f64>, m: f64) -> f64 {
    match cosine(x_fg, x_bg) {
        Some(cos) => (cos - m).max(0.0),
        None => 0.0,
    }
}

/// Per-snippet guide target: the max T-CAM probability over the label
/// classes, with its argmax class (lowest index wins ties). Shared with the
/// gradient code, which routes the max-pool gradient to that class.
pub(crate) fn guide_targets(tcam: &Array2<f64>, labels: &[usize]) -> Vec<(usize, f64)> {
    let mut sorted: Vec<usize> = labels.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let t = tcam.dim().0;
    let mut out = Vec::with_capacity(t);
    for ti in 0..t {
        let mut best_class = sorted[0];
        let mut best = tcam[[ti, best_class]];
        for &cls in &sorted[1..] {
            // Strict > keeps the lowest class index on ties.
            if tcam[[ti, cls]] > best {
                best = tcam[[ti, cls]];
                best_class = cls;
            }
        }
        out.push((best_class, best));
    }
    out
}

/// Consensus guide loss: mean |a_i - s*_i| where s*_i is the label-class
/// max-pooled T-CAM. The attention is treated as a constant here — the grad
/// module differentiates only through the T-CAM side.
pub fn loss_guide(a: &Array1<f64>, tcam: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    let c = tcam.dim().1;
    check_labels(labels, c)?;
    let t = a.len();
    if t != tcam.dim().0 {
        return Err(Error::validation("attention/T-CAM length mismatch"));
    }
    let targets = guide_targets(tcam, labels);
    let sum: f64 = (0..t).map(|i| (a[i] - targets[i].1).abs()).sum();
    Ok(sum / t as f64)
}

/// Pseudo-GT binary cross entropy on the attention sequence.
pub fn loss_pseudo(a: &Array1<f64>, g: &PseudoGT) -> Result<f64> {
    let t = a.len();
    if g.g.len() != t {
        return Err(Error::validation(format!(
            "pseudo-GT length {} does not match attention length {t}",
            g.g.len()
        )));
    }
    let mut sum = 0.0;
    for i in 0..t {
        let gi = f64::from(g.g[i]);
        sum += gi * clamped_ln(a[i]) + (1.0 - gi) * clamped_ln(1.0 - a[i]);
    }
    Ok(-sum / t as f64)
}

/// Weighted base-training loss (classification + all attention shaping).
pub fn base_loss(out: &StreamOutput, labels: &[usize], w: &LossWeights) -> Result<LossBreakdown> {
    let cls = loss_cls(&out.y_hat, labels)?;
    let smooth = loss_smooth(&out.a);
    let norm = loss_norm(&out.a, w.k);
    let dist = loss_dist(&out.x_fg, &out.x_bg, w.m);
    let guide = loss_guide(&out.a, &out.tcam, labels)?;
    let total = cls + w.lambda1 * smooth + w.lambda2 * norm + w.lambda3 * dist + w.lambda4 * guide;
    Ok(LossBreakdown {
        cls,
        smooth: Some(smooth),
        norm: Some(norm),
        dist,
        guide,
        pseudo: None,
        total,
    })
}

/// Weighted refinement loss: smooth/norm terms are dropped, the pseudo BCE
/// takes over the attention shaping.
pub fn refine_loss(
    out: &StreamOutput,
    labels: &[usize],
    g: &PseudoGT,
    w: &LossWeights,
) -> Result<LossBreakdown> {
    let cls = loss_cls(&out.y_hat, labels)?;
    let dist = loss_dist(&out.x_fg, &out.x_bg, w.m);
    let guide = loss_guide(&out.a, &out.tcam, labels)?;
    let pseudo = loss_pseudo(&out.a, g)?;
    let total = cls + w.lambda3 * dist + w.lambda4 * guide + w.lambda5 * pseudo;
    Ok(LossBreakdown { cls, smooth: None, norm: None, dist, guide, pseudo: Some(pseudo), total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward, init_params};
    use crate::seeding;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array2};
    use rand::Rng;

    #[test]
    fn cls_uniform_two_class_is_ln2() {
        let v = loss_cls(&array![0.5, 0.5], &[0]).unwrap();
        assert_abs_diff_eq!(v, 2.0f64.ln(), epsilon = 1e-9);
        // Symmetry between the two labelings.
        assert_abs_diff_eq!(v, loss_cls(&array![0.5, 0.5], &[1]).unwrap(), epsilon = 1e-15);
    }

    #[test]
    fn cls_perfect_prediction_tends_to_zero() {
        let v = loss_cls(&array![1.0 - 1e-9, 1e-9], &[0]).unwrap();
        assert!(v < 1e-8, "{v}");
        // Fully saturated probabilities stay finite thanks to the clamp.
        let sat = loss_cls(&array![1.0, 0.0], &[1]).unwrap();
        assert!(sat.is_finite());
    }

    #[test]
    fn cls_rejects_empty_or_out_of_range_labels() {
        assert!(loss_cls(&array![0.5, 0.5], &[]).is_err());
        assert!(loss_cls(&array![0.5, 0.5], &[2]).is_err());
    }

    #[test]
    fn smooth_constant_is_zero_and_hand_value() {
        assert_eq!(loss_smooth(&Array1::from_elem(5, 0.7)), 0.0);
        assert_eq!(loss_smooth(&array![0.9]), 0.0);
        let v = loss_smooth(&array![0.2, 0.6, 0.6, 1.0]);
        assert_abs_diff_eq!(v, 0.8 / 3.0, epsilon = 1e-9);
        assert_abs_diff_eq!(v, 0.26667, epsilon = 1e-5);
    }

    #[test]
    fn smooth_is_reversal_invariant() {
        let a = array![0.1, 0.8, 0.3, 0.9, 0.2];
        let mut rev = a.to_vec();
        rev.reverse();
        assert_abs_diff_eq!(
            loss_smooth(&a),
            loss_smooth(&Array1::from_vec(rev)),
            epsilon = 1e-15
        );
    }

    #[test]
    fn norm_hand_values() {
        // T=4, k=8 -> l=1: min 0.1 minus max 0.9.
        let v = loss_norm(&array![0.9, 0.8, 0.1, 0.2], 8);
        assert_abs_diff_eq!(v, -0.8, epsilon = 1e-9);
        // Constant sequence -> 0.
        assert_abs_diff_eq!(loss_norm(&Array1::from_elem(6, 0.4), 8), 0.0, epsilon = 1e-15);
        // T=16, k=8 -> l=2 with a_i = i/17.
        let a = Array1::from_shape_fn(16, |i| (i + 1) as f64 / 17.0);
        let expect = (1.0 + 2.0) / 2.0 / 17.0 - (15.0 + 16.0) / 2.0 / 17.0;
        assert_abs_diff_eq!(loss_norm(&a, 8), expect, epsilon = 1e-12);
    }

    #[test]
    fn norm_matches_full_sort_oracle() {
        let mut rng = seeding::rng(31, "test/norm");
        for trial in 0..200 {
            let t = rng.random_range(1..40);
            let a = Array1::from_shape_fn(t, |_| rng.random_range(0.0..1.0));
            let k = rng.random_range(1..12);
            let l = (t / k).max(1);
            let mut sorted = a.to_vec();
            sorted.sort_by(|x, y| x.partial_cmp(y).unwrap());
            let oracle: f64 = sorted[..l.min(t)].iter().sum::<f64>() / l as f64
                - sorted[t.saturating_sub(l)..].iter().sum::<f64>() / l as f64;
            assert_abs_diff_eq!(loss_norm(&a, k), oracle, epsilon = 1e-12);
            assert!(loss_norm(&a, k) <= 0.0, "trial {trial}");
        }
    }

    #[test]
    fn dist_hand_values_and_scale_invariance() {
        // Orthogonal vectors: cos = 0 -> hinge inactive.
        assert_eq!(loss_dist(&array![1.0, 0.0], &array![0.0, 1.0], 0.5), 0.0);
        // Identical vectors: cos = 1 -> 1 - m.
        let v = array![0.3, -0.4, 0.2];
        assert_abs_diff_eq!(loss_dist(&v, &v, 0.5), 0.5, epsilon = 1e-9);
        // Cosine is scale invariant.
        let a = array![1.0, 2.0, -1.0];
        let b = array![0.5, 1.0, 0.3];
        assert_abs_diff_eq!(
            loss_dist(&a, &b, 0.1),
            loss_dist(&(3.7 * &a), &(0.02 * &b), 0.1),
            epsilon = 1e-12
        );
        // Zero-vector guard.
        assert_eq!(loss_dist(&array![0.0, 0.0], &b, 0.5), 0.0);
    }

    #[test]
    fn guide_hand_values() {
        // Perfect consensus with a single label.
        let a = array![0.3, 0.8];
        let tcam = array![[0.3, 0.7], [0.8, 0.2]];
        assert_abs_diff_eq!(loss_guide(&a, &tcam, &[0]).unwrap(), 0.0, epsilon = 1e-12);
        // Opposite sequences: mean of |1-0| and |0-1| = 1.
        let tcam2 = array![[0.0, 1.0], [1.0, 0.0]];
        assert_abs_diff_eq!(
            loss_guide(&array![1.0, 0.0], &tcam2, &[0]).unwrap(),
            1.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn guide_max_pools_over_label_classes() {
        // Two labels; T-CAM row (0.3, 0.6, 0.1): the target must be 0.6.
        let a = array![0.9];
        let tcam = array![[0.3, 0.6, 0.1]];
        let v = loss_guide(&a, &tcam, &[0, 1]).unwrap();
        assert_abs_diff_eq!(v, (0.9f64 - 0.6).abs(), epsilon = 1e-12);
        // Non-label class 2 is never used even if larger.
        let tcam2 = array![[0.1, 0.2, 0.7]];
        let v2 = loss_guide(&a, &tcam2, &[0, 1]).unwrap();
        assert_abs_diff_eq!(v2, (0.9f64 - 0.2).abs(), epsilon = 1e-12);
    }

    #[test]
    fn pseudo_hand_value_and_flip_symmetry() {
        let g = PseudoGT { g: vec![1, 0], source_iteration: 0 };
        let v = loss_pseudo(&array![0.5, 0.5], &g).unwrap();
        assert_abs_diff_eq!(v, 2.0f64.ln(), epsilon = 1e-9);
        // a matching G exactly -> 0 (clamped logs keep it finite).
        let exact = loss_pseudo(&array![1.0, 0.0], &g).unwrap();
        assert_abs_diff_eq!(exact, 0.0, epsilon = 1e-12);
        // Flip both a and G: same value.
        let a = array![0.7, 0.2, 0.4];
        let g1 = PseudoGT { g: vec![1, 0, 0], source_iteration: 0 };
        let g2 = PseudoGT { g: vec![0, 1, 1], source_iteration: 0 };
        let flipped = a.mapv(|v| 1.0 - v);
        assert_abs_diff_eq!(
            loss_pseudo(&a, &g1).unwrap(),
            loss_pseudo(&flipped, &g2).unwrap(),
            epsilon = 1e-12
        );
        // Length mismatch is an error.
        assert!(loss_pseudo(&array![0.5], &g).is_err());
    }

    fn random_output(seed: u64) -> (crate::model::StreamOutput, Vec<usize>) {
        let p = init_params(6, 5, 3, seed);
        let feats = Array2::from_shape_fn((9, 6), |(i, j)| {
            ((i * 7 + j * 3 + seed as usize) % 13) as f64 / 6.5 - 1.0
        });
        (forward(&p, &feats).unwrap(), vec![(seed as usize) % 3])
    }

    #[test]
    fn base_loss_matches_summation_oracle() {
        let w = LossWeights::default();
        for seed in 0..20 {
            let (out, labels) = random_output(seed);
            let b = base_loss(&out, &labels, &w).unwrap();
            let oracle = b.cls
                + w.lambda1 * b.smooth.unwrap()
                + w.lambda2 * b.norm.unwrap()
                + w.lambda3 * b.dist
                + w.lambda4 * b.guide;
            assert_abs_diff_eq!(b.total, oracle, epsilon = 1e-15);
            assert!(b.pseudo.is_none());
        }
        // All weights zero: total collapses to the classification term.
        let (out, labels) = random_output(99);
        let z = LossWeights { lambda1: 0.0, lambda2: 0.0, lambda3: 0.0, lambda4: 0.0, ..w };
        let b = base_loss(&out, &labels, &z).unwrap();
        assert_abs_diff_eq!(b.total, b.cls, epsilon = 1e-15);
    }

    #[test]
    fn refine_loss_matches_summation_oracle() {
        let w = LossWeights::default();
        for seed in 0..20 {
            let (out, labels) = random_output(seed);
            let g = PseudoGT {
                g: out.a.iter().map(|&v| u8::from(v > 0.5)).collect(),
                source_iteration: 0,
            };
            let b = refine_loss(&out, &labels, &g, &w).unwrap();
            let oracle =
                b.cls + w.lambda3 * b.dist + w.lambda4 * b.guide + w.lambda5 * b.pseudo.unwrap();
            assert_abs_diff_eq!(b.total, oracle, epsilon = 1e-15);
            assert!(b.smooth.is_none() && b.norm.is_none());
        }
        // lambda5 = 0 reduces to the base terms that survive refinement.
        let (out, labels) = random_output(7);
        let g = PseudoGT { g: vec![0; out.a.len()], source_iteration: 0 };
        let z = LossWeights { lambda5: 0.0, ..w };
        let b = refine_loss(&out, &labels, &g, &z).unwrap();
        assert_abs_diff_eq!(
            b.total,
            b.cls + w.lambda3 * b.dist + w.lambda4 * b.guide,
            epsilon = 1e-15
        );
    }

    #[test]
    fn loss_ranges_hold_on_random_instances() {
        let mut rng = seeding::rng(77, "test/ranges");
        let w = LossWeights::default();
        for _ in 0..1000 {
            let t = rng.random_range(1..24);
            let c = rng.random_range(2..6);
            let e = rng.random_range(2..5);
            let a = Array1::from_shape_fn(t, |_| rng.random_range(1e-6..1.0 - 1e-6));
            let mut tcam = Array2::from_shape_fn((t, c), |_| rng.random_range(0.01..1.0));
            for mut row in tcam.rows_mut() {
                let s = row.sum();
                row.mapv_inplace(|v| v / s);
            }
            let mut y = Array1::from_shape_fn(c, |_| rng.random_range(0.01..1.0));
            let s = y.sum();
            y.mapv_inplace(|v| v / s);
            let x_fg = Array1::from_shape_fn(e, |_| rng.random_range(-2.0..2.0));
            let x_bg = Array1::from_shape_fn(e, |_| rng.random_range(-2.0..2.0));
            let labels = vec![rng.random_range(0..c)];
            let g = PseudoGT {
                g: (0..t).map(|_| u8::from(rng.random_range(0.0..1.0) > 0.5)).collect(),
                source_iteration: 0,
            };

            let v_norm = loss_norm(&a, w.k);
            assert!(v_norm > -1.0 && v_norm <= 0.0, "norm {v_norm}");
            let v_smooth = loss_smooth(&a);
            assert!((0.0..1.0).contains(&v_smooth), "smooth {v_smooth}");
            let v_guide = loss_guide(&a, &tcam, &labels).unwrap();
            assert!((0.0..=1.0).contains(&v_guide), "guide {v_guide}");
            let v_dist = loss_dist(&x_fg, &x_bg, w.m);
            assert!(v_dist >= 0.0 && v_dist <= 1.0 - w.m + 1e-12, "dist {v_dist}");
            assert!(loss_cls(&y, &labels).unwrap() >= 0.0);
            assert!(loss_pseudo(&a, &g).unwrap() >= 0.0);
        }
    }
}
