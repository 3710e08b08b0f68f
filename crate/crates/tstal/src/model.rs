//! One stream's base model: temporal-convolution embedding, sigmoid attention
//! head, attention pooling, video-level classifier, and per-snippet class
//! activation map (T-CAM). Forward pass only — gradients live in [`crate::grad`].
//!
//! Shapes: features `T×D` -> embedded `x` `T×E` -> attention `a` (length `T`)
//! -> pooled foreground/background vectors (length `E`) -> class scores
//! (length `C`). The classifier is shared between the video-level prediction
//! and the T-CAM rows.

use ndarray::{Array1, Array2, Array3};
use rand::Rng;

use crate::error::{Error, Result};
use crate::seeding;

/// All learnable parameters of one stream.
///
/// Flattened coordinate order (used by the optimizer, EMA, checkpoints, and
/// finite-difference checks): `conv_w` row-major `(e, d, k)`, `conv_b`,
/// `attn_w`, `attn_b`, `cls_w` row-major `(c, e)`, `cls_b`.
#[derive(Clone, Debug, PartialEq)]
pub struct BaseModelParams {
    /// Embedding kernel, `E×D×3` (temporal width 3).
    pub conv_w: Array3<f64>,
    /// Embedding bias, length `E`.
    pub conv_b: Array1<f64>,
    /// Attention head weights, length `E`.
    pub attn_w: Array1<f64>,
    /// Attention head bias.
    pub attn_b: f64,
    /// Classifier weights, `C×E` (row `c` scores class `c`).
    pub cls_w: Array2<f64>,
    /// Classifier biases, length `C`.
    pub cls_b: Array1<f64>,
}

impl BaseModelParams {
    /// `(D, E, C)` as implied by the weight shapes.
    pub fn dims(&self) -> (usize, usize, usize) {
        let (e, d, _) = self.conv_w.dim();
        let (c, _) = self.cls_w.dim();
        (d, e, c)
    }

    /// Total number of scalar coordinates.
    pub fn coord_count(&self) -> usize {
        let (d, e, c) = self.dims();
        e * d * 3 + e + e + 1 + c * e + c
    }

    /// Checks internal shape consistency and finiteness.
    pub fn validate(&self) -> Result<()> {
        let (e, _, k) = self.conv_w.dim();
        let (_, ce) = self.cls_w.dim();
        if k != 3 {
            return Err(Error::validation("conv_w temporal width must be 3"));
        }
        if self.conv_b.len() != e || self.attn_w.len() != e || ce != e {
            return Err(Error::validation("parameter shapes disagree on embedding dim E"));
        }
        if self.cls_b.len() != self.cls_w.dim().0 {
            return Err(Error::validation("cls_b length must match cls_w rows"));
        }
        if !self.flatten().iter().all(|v| v.is_finite()) {
            return Err(Error::validation("non-finite parameter value"));
        }
        Ok(())
    }

    /// Flattens to the documented fixed coordinate order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.coord_count());
        out.extend(self.conv_w.iter());
        out.extend(self.conv_b.iter());
        out.extend(self.attn_w.iter());
        out.push(self.attn_b);
        out.extend(self.cls_w.iter());
        out.extend(self.cls_b.iter());
        out
    }

    /// Rebuilds params of the given dims from the documented flat order.
    pub fn from_flat(d: usize, e: usize, c: usize, flat: &[f64]) -> Result<Self> {
        let expect = e * d * 3 + e + e + 1 + c * e + c;
        if flat.len() != expect {
            return Err(Error::validation(format!(
                "flat parameter vector has {} coordinates, expected {expect}",
                flat.len()
            )));
        }
        let mut it = flat.iter().copied();
        let mut take = |n: usize| -> Vec<f64> { it.by_ref().take(n).collect() };
        let conv_w = Array3::from_shape_vec((e, d, 3), take(e * d * 3)).unwrap();
        let conv_b = Array1::from_vec(take(e));
        let attn_w = Array1::from_vec(take(e));
        let attn_b = take(1)[0];
        let cls_w = Array2::from_shape_vec((c, e), take(c * e)).unwrap();
        let cls_b = Array1::from_vec(take(c));
        Ok(BaseModelParams { conv_w, conv_b, attn_w, attn_b, cls_w, cls_b })
    }
}

/// Forward-pass result for one video through one stream.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamOutput {
    /// Embedded features, `T×E`.
    pub x: Array2<f64>,
    /// Per-snippet attention, entries strictly in (0,1).
    pub a: Array1<f64>,
    /// Attention-weighted foreground feature, length `E`.
    pub x_fg: Array1<f64>,
    /// Complement-attention background feature, length `E`.
    pub x_bg: Array1<f64>,
    /// Video-level class probabilities (sums to 1).
    pub y_hat: Array1<f64>,
    /// Per-snippet class probabilities, `T×C` (rows sum to 1).
    pub tcam: Array2<f64>,
}

/// Uniform init in `[-1/sqrt(fan_in), +1/sqrt(fan_in)]` for weights
/// (fan-in `3D` for the conv kernel, `E` for both heads), zero biases.
/// Deterministic given `seed`.
pub fn init_params(d: usize, e: usize, c: usize, seed: u64) -> BaseModelParams {
    assert!(d > 0 && e > 0 && c > 0, "dims must be positive");
    let mut rng = seeding::rng(seed, "init");
    let conv_bound = 1.0 / ((3 * d) as f64).sqrt();
    let head_bound = 1.0 / (e as f64).sqrt();
    let draw = |n: usize, bound: f64, rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
    };
    let conv_w = Array3::from_shape_vec((e, d, 3), draw(e * d * 3, conv_bound, &mut rng)).unwrap();
    let attn_w = Array1::from_vec(draw(e, head_bound, &mut rng));
    let cls_w = Array2::from_shape_vec((c, e), draw(c * e, head_bound, &mut rng)).unwrap();
    BaseModelParams {
        conv_w,
        conv_b: Array1::zeros(e),
        attn_w,
        attn_b: 0.0,
        cls_w,
        cls_b: Array1::zeros(c),
    }
}

/// Width-3 temporal convolution with zero padding; preserves length.
/// Output row `t` = sum over k in {-1,0,1} of `conv_w[:,:,k+1] · features[t+k]`
/// plus `conv_b`, rows outside `[0,T)` treated as zero.
pub fn temporal_conv(
    features: &Array2<f64>,
    conv_w: &Array3<f64>,
    conv_b: &Array1<f64>,
) -> Result<Array2<f64>> {
    let (t, d) = features.dim();
    let (e, dk, k) = conv_w.dim();
    if dk != d || k != 3 || conv_b.len() != e {
        return Err(Error::validation(format!(
            "temporal_conv shape mismatch: features T x {d}, conv_w {e} x {dk} x {k}, conv_b {}",
            conv_b.len()
        )));
    }
    let mut out = Array2::zeros((t, e));
    for ti in 0..t {
        for ei in 0..e {
            let mut acc = conv_b[ei];
            for ki in 0..3usize {
                // Source row t + (k-1); zero pad outside the sequence.
                let Some(src) = (ti + ki).checked_sub(1) else { continue };
                if src >= t {
                    continue;
                }
                for di in 0..d {
                    acc += conv_w[[ei, di, ki]] * features[[src, di]];
                }
            }
            out[[ti, ei]] = acc;
        }
    }
    Ok(out)
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Per-snippet sigmoid attention: `a_t = sigma(attn_w . x_t + attn_b)`.
pub fn attention_head(x: &Array2<f64>, attn_w: &Array1<f64>, attn_b: f64) -> Array1<f64> {
    let t = x.dim().0;
    let mut a = Array1::zeros(t);
    for ti in 0..t {
        let z = x.row(ti).dot(attn_w) + attn_b;
        a[ti] = sigmoid(z);
    }
    a
}

/// Attention-weighted mean of the embedded rows: `sum(a_i x_i) / sum(a_i)`.
pub fn attention_pool(x: &Array2<f64>, a: &Array1<f64>) -> Array1<f64> {
    weighted_mean(x, a.iter().copied())
}

/// Complement-attention mean: `sum((1-a_i) x_i) / sum(1-a_i)`.
pub fn background_pool(x: &Array2<f64>, a: &Array1<f64>) -> Array1<f64> {
    weighted_mean(x, a.iter().map(|&ai| 1.0 - ai))
}

fn weighted_mean(x: &Array2<f64>, weights: impl Iterator<Item = f64>) -> Array1<f64> {
    let (t, e) = x.dim();
    let mut acc = Array1::zeros(e);
    let mut total = 0.0;
    for (ti, w) in weights.take(t).enumerate() {
        total += w;
        for ei in 0..e {
            acc[ei] += w * x[[ti, ei]];
        }
    }
    // Sigmoid openness keeps total > 0 for any nonempty sequence.
    acc / total
}

/// Numerically stable in-place softmax (max-logit subtraction).
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Video-level class probabilities: softmax of `cls_w . x_fg + cls_b`.
pub fn classify(x_fg: &Array1<f64>, cls_w: &Array2<f64>, cls_b: &Array1<f64>) -> Array1<f64> {
    let mut logits: Vec<f64> = cls_w.rows().into_iter().map(|w| w.dot(x_fg)).collect();
    for (l, b) in logits.iter_mut().zip(cls_b.iter()) {
        *l += b;
    }
    softmax_in_place(&mut logits);
    Array1::from_vec(logits)
}

/// Temporal class activation map: the classifier applied to every snippet,
/// row `i` = softmax over classes of `cls_w . x_i + cls_b`. Shares parameters
/// with [`classify`].
pub fn tcam(x: &Array2<f64>, cls_w: &Array2<f64>, cls_b: &Array1<f64>) -> Array2<f64> {
    let (t, _) = x.dim();
    let c = cls_w.dim().0;
    let mut out = Array2::zeros((t, c));
    for ti in 0..t {
        let xi = x.row(ti);
        let mut logits: Vec<f64> = cls_w.rows().into_iter().map(|w| w.dot(&xi)).collect();
        for (l, b) in logits.iter_mut().zip(cls_b.iter()) {
            *l += b;
        }
        softmax_in_place(&mut logits);
        for ci in 0..c {
            out[[ti, ci]] = logits[ci];
        }
    }
    out
}

/// Full forward pass for one video through one stream.
pub fn forward(params: &BaseModelParams, features: &Array2<f64>) -> Result<StreamOutput> {
    let (d, _, _) = params.dims();
    if features.dim().1 != d {
        return Err(Error::validation(format!(
            "feature dim {} does not match model D={d}",
            features.dim().1
        )));
    }
    if features.dim().0 == 0 {
        return Err(Error::validation("empty feature sequence"));
    }
    let x = temporal_conv(features, &params.conv_w, &params.conv_b)?;
    let a = attention_head(&x, &params.attn_w, params.attn_b);
    let x_fg = attention_pool(&x, &a);
    let x_bg = background_pool(&x, &a);
    let y_hat = classify(&x_fg, &params.cls_w, &params.cls_b);
    let tcam = tcam(&x, &params.cls_w, &params.cls_b);
    Ok(StreamOutput { x, a, x_fg, x_bg, y_hat, tcam })
}

// ---------------------------------------------------------------------------
// Parameter blob encoding (shared by the checkpoint format in optim)
// ---------------------------------------------------------------------------

/// Serializes params as little-endian f64 in the documented flat order.
pub fn params_to_bytes(params: &BaseModelParams) -> Vec<u8> {
    let flat = params.flatten();
    let mut bytes = Vec::with_capacity(flat.len() * 8);
    for v in flat {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes
}

/// Inverse of [`params_to_bytes`] for the given dims.
pub fn params_from_bytes(d: usize, e: usize, c: usize, bytes: &[u8]) -> Result<BaseModelParams> {
    if bytes.len() % 8 != 0 {
        return Err(Error::validation("parameter blob length not a multiple of 8"));
    }
    let flat: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|ch| f64::from_le_bytes(ch.try_into().unwrap()))
        .collect();
    BaseModelParams::from_flat(d, e, c, &flat)
}
