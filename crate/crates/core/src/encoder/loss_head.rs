//! Batch loss over encoded sequences, with gradients routed back onto the
//! slot hidden states and scoring-head parameters.
//!
//! Three terms, each averaged over the batch:
//!
//! * **region**: focal loss over every (text query, object) logit
//!   `a*cos + b` against the item's assignment targets;
//! * **image**: one batch-square contrastive matrix per (global slot,
//!   caption channel) pair with identity targets;
//! * **quality**: focal loss of the quality-head logits against the best
//!   overlap, over assigned positives only (token modes with quality slots).

use super::forward::{self, ImageFwd, TextFwd};
use super::linalg;
use super::{EncoderError, EncoderParams};
use crate::layout::{TextKind, TokenSequence};
use crate::objectives::{self, dfocal_dlogit, focal_term, LossConfig};
use crate::real::Real;

/// One image with its supervision, ready to batch.
#[derive(Clone, Debug)]
pub struct TrainItem {
    pub image: TokenSequence,
    /// Per-annotation text queries (rows of `region_targets`).
    pub local_texts: Vec<TokenSequence>,
    /// `region_targets[m][j]`: target for query `m` against object `j`,
    /// in `[0, 1]`.
    pub region_targets: Vec<Vec<f64>>,
    /// Best ground-truth overlap per object slot.
    pub ustar: Vec<f64>,
    /// Object indices whose overlap passes the positive threshold.
    pub positives: Vec<usize>,
    /// Caption sequences, one per configured caption channel.
    pub captions: Vec<TokenSequence>,
}

/// Batch loss decomposition (unweighted component means; `total` applies
/// the configured weights).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    pub region: f64,
    pub image: f64,
    pub iou: f64,
    pub total: f64,
}

/// Forward results for every sequence of one item.
pub(crate) struct ItemFwd<T> {
    pub image: ImageFwd<T>,
    pub locals: Vec<TextFwd<T>>,
    pub captions: Vec<TextFwd<T>>,
}

/// Loss gradients with respect to one item's slot hidden states.
pub(crate) struct ItemSlotGrads<T> {
    pub d_objects: Vec<Vec<T>>,
    pub d_iou_slots: Vec<Vec<T>>,
    pub d_globals: Vec<Vec<T>>,
    pub d_locals: Vec<Vec<T>>,
    pub d_captions: Vec<Vec<T>>,
}

pub(crate) struct HeadGrads<T> {
    pub items: Vec<ItemSlotGrads<T>>,
    pub d_iou_w: Vec<T>,
    pub d_iou_b: T,
    pub d_sim_a: T,
    pub d_sim_b: T,
}

struct CosParts<T> {
    cos: T,
    nu: T,
    nv: T,
}

fn cosine<T: Real>(u: &[T], v: &[T]) -> Result<CosParts<T>, EncoderError> {
    let nu = linalg::norm(u);
    let nv = linalg::norm(v);
    if !(nu > T::zero()) || !(nv > T::zero()) || !nu.is_finite() || !nv.is_finite() {
        return Err(EncoderError::DegenerateEmbedding);
    }
    Ok(CosParts {
        cos: linalg::dot(u, v) / (nu * nv),
        nu,
        nv,
    })
}

/// Gradients of `dcos * cos(u, v)` with respect to `u` and `v`.
fn cosine_grads<T: Real>(cp: &CosParts<T>, u: &[T], v: &[T], dcos: T) -> (Vec<T>, Vec<T>) {
    let cross = dcos / (cp.nu * cp.nv);
    let cu = dcos * cp.cos / (cp.nu * cp.nu);
    let cv = dcos * cp.cos / (cp.nv * cp.nv);
    let mut du = vec![T::zero(); u.len()];
    linalg::axpy(cross, v, &mut du);
    linalg::axpy(-cu, u, &mut du);
    let mut dv = vec![T::zero(); v.len()];
    linalg::axpy(cross, u, &mut dv);
    linalg::axpy(-cv, v, &mut dv);
    (du, dv)
}

fn shape_err(msg: impl Into<String>) -> EncoderError {
    EncoderError::Shape(msg.into())
}

/// Validate one item against the config and run all of its sequences with
/// caches kept for backward.
pub(crate) fn forward_item<T: Real>(
    params: &EncoderParams<T>,
    item: &TrainItem,
) -> Result<ItemFwd<T>, EncoderError> {
    let n = item.image.slots.objects.len();
    if item.region_targets.len() != item.local_texts.len() {
        return Err(shape_err(format!(
            "{} target rows for {} text queries",
            item.region_targets.len(),
            item.local_texts.len()
        )));
    }
    for row in &item.region_targets {
        if row.len() != n {
            return Err(shape_err(format!(
                "target row width {} != {} objects",
                row.len(),
                n
            )));
        }
        if row.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(shape_err("region targets must lie in [0, 1]"));
        }
    }
    if params.cfg.token_mode.has_iou_token() {
        if item.ustar.len() != n {
            return Err(shape_err(format!(
                "{} overlap values for {} objects",
                item.ustar.len(),
                n
            )));
        }
        for &j in &item.positives {
            if j >= n {
                return Err(shape_err(format!("positive index {j} out of range")));
            }
            if !(0.0..=1.0).contains(&item.ustar[j]) {
                return Err(shape_err("overlap targets must lie in [0, 1]"));
            }
        }
    }
    if item.captions.len() != params.cfg.caption_channels() {
        return Err(shape_err(format!(
            "{} captions for {} caption channels",
            item.captions.len(),
            params.cfg.caption_channels()
        )));
    }
    for seq in &item.local_texts {
        if !matches!(seq.slots.text, Some((_, TextKind::Local))) {
            return Err(shape_err("local query must be a local-text sequence"));
        }
    }
    for seq in &item.captions {
        if !matches!(seq.slots.text, Some((_, TextKind::Global))) {
            return Err(shape_err("caption must be a global-text sequence"));
        }
    }
    let image = forward::run_image(params, &item.image, true)?;
    let locals = item
        .local_texts
        .iter()
        .map(|seq| forward::run_text(params, seq, true))
        .collect::<Result<Vec<_>, _>>()?;
    let captions = item
        .captions
        .iter()
        .map(|seq| forward::run_text(params, seq, true))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ItemFwd {
        image,
        locals,
        captions,
    })
}

fn zero_grads_for<T: Real>(fwd: &ItemFwd<T>, d: usize) -> ItemSlotGrads<T> {
    ItemSlotGrads {
        d_objects: vec![vec![T::zero(); d]; fwd.image.objects.len()],
        d_iou_slots: vec![vec![T::zero(); d]; fwd.image.iou_hiddens.len()],
        d_globals: vec![vec![T::zero(); d]; fwd.image.globals.len()],
        d_locals: vec![vec![T::zero(); d]; fwd.locals.len()],
        d_captions: vec![vec![T::zero(); d]; fwd.captions.len()],
    }
}

/// Compute the batch loss and its gradients with respect to slot hidden
/// states and head parameters. Loss values accumulate in f64 regardless of
/// the working precision.
pub(crate) fn run<T: Real>(
    params: &EncoderParams<T>,
    items: &[TrainItem],
    fwds: &[ItemFwd<T>],
    cfg: &LossConfig,
) -> Result<(LossParts, HeadGrads<T>), EncoderError> {
    let b = items.len();
    let invb = 1.0 / b as f64;
    let d = params.cfg.d_model;
    let gamma = T::c(cfg.gamma);
    let alpha = T::c(cfg.alpha);
    let a = params.sim_a;
    let bias = params.sim_b;
    let mut hg = HeadGrads {
        items: fwds.iter().map(|f| zero_grads_for(f, d)).collect(),
        d_iou_w: vec![T::zero(); d],
        d_iou_b: T::zero(),
        d_sim_a: T::zero(),
        d_sim_b: T::zero(),
    };
    let mut region_sum = 0.0;
    let mut iou_sum = 0.0;
    let mut image_sum = 0.0;

    let w_region = T::c(cfg.lambda_region * invb);
    let w_iou = T::c(cfg.lambda_iou * invb);
    let w_image = T::c(cfg.lambda_image * invb);

    for (i, (item, fwd)) in items.iter().zip(fwds).enumerate() {
        for (m, text) in fwd.locals.iter().enumerate() {
            for (j, obj) in fwd.image.objects.iter().enumerate() {
                let cp = cosine(obj, &text.emb)?;
                let logit = a * cp.cos + bias;
                let target = T::c(item.region_targets[m][j]);
                region_sum += focal_term(logit, target, gamma, alpha).f64();
                let dl = dfocal_dlogit(logit, target, gamma, alpha) * w_region;
                hg.d_sim_a += dl * cp.cos;
                hg.d_sim_b += dl;
                let (dobj, dtext) = cosine_grads(&cp, obj, &text.emb, dl * a);
                let sg = &mut hg.items[i];
                linalg::axpy(T::one(), &dobj, &mut sg.d_objects[j]);
                linalg::axpy(T::one(), &dtext, &mut sg.d_locals[m]);
            }
        }
        if params.cfg.token_mode.has_iou_token() {
            for &j in &item.positives {
                let h = &fwd.image.iou_hiddens[j];
                let logit = linalg::dot(&params.iou_w, h) + params.iou_b;
                let target = T::c(item.ustar[j]);
                iou_sum += focal_term(logit, target, gamma, alpha).f64();
                let dl = dfocal_dlogit(logit, target, gamma, alpha) * w_iou;
                linalg::axpy(dl, h, &mut hg.d_iou_w);
                hg.d_iou_b += dl;
                linalg::axpy(dl, &params.iou_w, &mut hg.items[i].d_iou_slots[j]);
            }
        }
    }

    for &(slot, chan) in &params.cfg.caption_pairs() {
        for i in 0..b {
            for j in 0..b {
                let glob = &fwds[i].image.globals[slot];
                let cap = &fwds[j].captions[chan].emb;
                let cp = cosine(glob, cap)?;
                let logit = a * cp.cos + bias;
                let target = if i == j { T::one() } else { T::zero() };
                image_sum += focal_term(logit, target, gamma, alpha).f64();
                let dl = dfocal_dlogit(logit, target, gamma, alpha) * w_image;
                hg.d_sim_a += dl * cp.cos;
                hg.d_sim_b += dl;
                let (dglob, dcap) = cosine_grads(&cp, glob, cap, dl * a);
                linalg::axpy(T::one(), &dglob, &mut hg.items[i].d_globals[slot]);
                linalg::axpy(T::one(), &dcap, &mut hg.items[j].d_captions[chan]);
            }
        }
    }

    let region = region_sum * invb;
    let image = image_sum * invb;
    let iou = iou_sum * invb;
    let total = objectives::total_loss(region, image, iou, cfg);
    Ok((
        LossParts {
            region,
            image,
            iou,
            total,
        },
        hg,
    ))
}
