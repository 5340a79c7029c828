//! Training objectives: focal terms, label assignment, and the three loss
//! components (region-level contrastive, image-level contrastive, IoU
//! regression) combined by fixed weights.
//!
//! Every term is a function of logits; mapping embeddings to logits (and
//! routing gradients back to them) is the encoder's loss head. Each value
//! function has an analytic `d…_dlogit` companion; the finite-difference
//! audit exercises both through the full model.

use crate::geometry::{pairwise_iou, BBox};
use crate::real::Real;
use serde::{Deserialize, Serialize};

/// Loss hyper-parameters. `gamma`/`alpha` parameterize the focal terms;
/// the lambdas weight the three components; `iou_pos_threshold` is the
/// strict positive-assignment cutoff.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub gamma: f64,
    pub alpha: f64,
    pub lambda_region: f64,
    pub lambda_image: f64,
    pub lambda_iou: f64,
    pub iou_pos_threshold: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            alpha: 0.25,
            lambda_region: 1.0,
            lambda_image: 1.0,
            lambda_iou: 0.25,
            iou_pos_threshold: 0.5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.gamma >= 0.0) {
            return Err("gamma must be nonnegative".into());
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err("alpha must lie in [0, 1]".into());
        }
        if !(self.lambda_region >= 0.0 && self.lambda_image >= 0.0 && self.lambda_iou >= 0.0) {
            return Err("loss weights must be nonnegative and finite".into());
        }
        if !(self.iou_pos_threshold > 0.0 && self.iou_pos_threshold < 1.0) {
            return Err("iou_pos_threshold must lie in (0, 1)".into());
        }
        Ok(())
    }
}

/// Floor for log arguments; keeps every term finite at saturated logits.
pub const LOG_FLOOR: f64 = 1e-12;

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    let one = T::one();
    if x >= T::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    }
}

#[inline]
fn ln_clamped<T: Real>(x: T) -> T {
    x.max(T::c(LOG_FLOOR)).ln()
}

/// Sigmoid focal term for one logit.
///
/// Exact 0/1 targets use the α-balanced binary form
/// `−α_t · (1−p_t)^γ · ln p_t`; fractional targets use the quality form
/// `|t−p|^γ · (−t·ln p − (1−t)·ln(1−p))` (no α). Log arguments are clamped
/// at [`LOG_FLOOR`].
pub fn focal_term<T: Real>(logit: T, target: T, gamma: T, alpha: T) -> T {
    let one = T::one();
    let p = sigmoid(logit);
    if target == T::zero() || target == one {
        let (pt, at) = if target == one { (p, alpha) } else { (one - p, one - alpha) };
        -at * (one - pt).powf(gamma) * ln_clamped(pt)
    } else {
        let ce = -(target * ln_clamped(p) + (one - target) * ln_clamped(one - p));
        (target - p).abs().powf(gamma) * ce
    }
}

/// Analytic `∂ focal_term / ∂ logit`. Matches [`focal_term`] everywhere the
/// log clamp is inactive (i.e. for all logits reachable in training).
pub fn dfocal_dlogit<T: Real>(logit: T, target: T, gamma: T, alpha: T) -> T {
    let one = T::one();
    let p = sigmoid(logit);
    let dp = p * (one - p); // dσ/dlogit
    if target == T::zero() || target == one {
        let (pt, at, sign) =
            if target == one { (p, alpha, one) } else { (one - p, one - alpha, -one) };
        // d/dpt [−at (1−pt)^γ ln pt] = at·γ·(1−pt)^(γ−1)·ln pt − at·(1−pt)^γ/pt
        let q = one - pt;
        let d_dpt = at * gamma * q.powf(gamma - one) * ln_clamped(pt)
            - at * q.powf(gamma) / pt.max(T::c(LOG_FLOOR));
        sign * d_dpt * dp
    } else {
        let diff = p - target;
        if diff == T::zero() {
            // |t−p|^γ and its γ>1 derivative both vanish at p = t.
            return T::zero();
        }
        let ce = -(target * ln_clamped(p) + (one - target) * ln_clamped(one - p));
        let dce_dp = -target / p.max(T::c(LOG_FLOOR)) + (one - target) / (one - p).max(T::c(LOG_FLOOR));
        let w = diff.abs().powf(gamma);
        let dw_dp = gamma * diff.abs().powf(gamma - one) * diff.signum();
        (dw_dp * ce + w * dce_dp) * dp
    }
}

/// Per-proposal label assignment against one image's ground-truth boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelAssignment {
    /// `y[i][j]`: proposal `j` is a positive for annotation `i`
    /// (strictly `iou > threshold`).
    pub y: Vec<Vec<bool>>,
    /// `ustar[j]`: best IoU of proposal `j` against any ground truth
    /// (0 when there are no ground truths).
    pub ustar: Vec<f64>,
    /// Indices of proposals with `ustar > threshold`.
    pub positives: Vec<usize>,
}

pub fn assign_labels(proposals: &[BBox], gts: &[BBox], threshold: f64) -> LabelAssignment {
    let m = pairwise_iou(gts, proposals);
    let y: Vec<Vec<bool>> = m.iter().map(|row| row.iter().map(|&v| v > threshold).collect()).collect();
    let mut ustar = vec![0.0f64; proposals.len()];
    for row in &m {
        for (j, &v) in row.iter().enumerate() {
            if v > ustar[j] {
                ustar[j] = v;
            }
        }
    }
    let positives = ustar
        .iter()
        .enumerate()
        .filter_map(|(j, &u)| (u > threshold).then_some(j))
        .collect();
    LabelAssignment { y, ustar, positives }
}

/// Region-level contrastive loss for one image: the plain sum of focal terms
/// over the M×N (annotation × proposal) logit matrix. `targets` carries the
/// per-pair target values (0/1 in the hard modes, `y·u*` in the soft mode).
pub fn region_loss<T: Real>(logits: &[Vec<T>], targets: &[Vec<T>], cfg: &LossConfig) -> T {
    let (g, a) = (T::c(cfg.gamma), T::c(cfg.alpha));
    let mut acc = T::zero();
    for (lr, tr) in logits.iter().zip(targets) {
        assert_eq!(lr.len(), tr.len(), "logit/target shape mismatch");
        for (&l, &t) in lr.iter().zip(tr) {
            acc += focal_term(l, t, g, a);
        }
    }
    acc
}

/// Image-level contrastive loss over one B×B logit matrix with identity
/// targets: diagonal entries are positives, everything else negatives.
pub fn image_loss<T: Real>(logits: &[Vec<T>], cfg: &LossConfig) -> T {
    let (g, a) = (T::c(cfg.gamma), T::c(cfg.alpha));
    let mut acc = T::zero();
    for (i, row) in logits.iter().enumerate() {
        assert_eq!(row.len(), logits.len(), "image-level logit matrix must be square");
        for (j, &l) in row.iter().enumerate() {
            let t = if i == j { T::one() } else { T::zero() };
            acc += focal_term(l, t, g, a);
        }
    }
    acc
}

/// IoU regression loss for one image: quality-focal terms between predicted
/// IoU logits and the true best-IoU targets, over positive proposals only.
/// Nonnegative by construction.
pub fn iou_loss<T: Real>(
    iou_logits: &[T],
    ustar: &[T],
    positives: &[usize],
    cfg: &LossConfig,
) -> T {
    let (g, a) = (T::c(cfg.gamma), T::c(cfg.alpha));
    let mut acc = T::zero();
    for &j in positives {
        acc += focal_term(iou_logits[j], ustar[j], g, a);
    }
    acc
}

/// Weighted combination of the three components.
pub fn total_loss<T: Real>(region: T, image: T, iou: T, cfg: &LossConfig) -> T {
    T::c(cfg.lambda_region) * region + T::c(cfg.lambda_image) * image + T::c(cfg.lambda_iou) * iou
}
