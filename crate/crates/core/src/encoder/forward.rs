//! Forward pass with activation caching for the backward pass.

use super::linalg::{self, matmul};
use super::{check_sequence, EncoderError, EncoderParams};
use crate::layout::{OverrideKind, TextKind, TokenSequence};
use crate::objectives::sigmoid;
use crate::real::Real;

/// Added to the mean square before the root so the norm never divides by
/// zero.
pub(crate) const EPS_RMS: f64 = 1e-6;

/// Per-layer activations kept for the backward pass.
pub(crate) struct LayerCache<T> {
    pub x_in: Vec<T>,    // [L*d] layer input
    pub n1: Vec<T>,      // [L*d] first norm output
    pub r1: Vec<T>,      // [L] first norm root-mean-squares
    pub q: Vec<T>,       // [L*d]
    pub k: Vec<T>,       // [L*d]
    pub v: Vec<T>,       // [L*d]
    pub probs: Vec<T>,   // [H*L*L] causal attention rows (u > t stays zero)
    pub attn: Vec<T>,    // [L*d] head-concatenated attention output, pre-Wo
    pub h_mid: Vec<T>,   // [L*d] after the attention residual
    pub n2: Vec<T>,      // [L*d]
    pub r2: Vec<T>,      // [L]
    pub ffn_mid: Vec<T>, // [L*dff] pre-activation
    pub ffn_act: Vec<T>, // [L*dff]
}

pub(crate) struct SeqCache<T> {
    pub layers: Vec<LayerCache<T>>,
}

/// Image-sequence forward output: slot readouts plus (optionally) the
/// activation cache needed to run backward.
pub(crate) struct ImageFwd<T> {
    pub cache: Option<SeqCache<T>>,
    pub objects: Vec<Vec<T>>,
    pub iou_hiddens: Vec<Vec<T>>,
    pub globals: Vec<Vec<T>>,
}

pub(crate) struct TextFwd<T> {
    pub cache: Option<SeqCache<T>>,
    pub emb: Vec<T>,
    pub kind: TextKind,
    pub pos: usize,
}

/// Linear projection of a raw feature vector into model width.
pub(crate) fn project<T: Real>(feat: &[f32], w: &[T], b: &[T], d: usize) -> Vec<T> {
    let mut out = b.to_vec();
    for (p, &fv) in feat.iter().enumerate() {
        linalg::axpy(T::c(fv as f64), &w[p * d..(p + 1) * d], &mut out);
    }
    out
}

/// Token/override embedding plus learned position embedding.
fn embed<T: Real>(params: &EncoderParams<T>, seq: &TokenSequence) -> Vec<T> {
    let d = params.cfg.d_model;
    let l = seq.ids.len();
    let mut x = vec![T::zero(); l * d];
    for (t, &id) in seq.ids.iter().enumerate() {
        let row = &params.tok_embed[id as usize * d..(id as usize + 1) * d];
        x[t * d..(t + 1) * d].copy_from_slice(row);
    }
    for ov in &seq.overrides {
        let projected = match ov.kind {
            OverrideKind::Patch => project(&ov.feat, &params.patch_w, &params.patch_b, d),
            OverrideKind::Roi => project(&ov.feat, &params.roi_w, &params.roi_b, d),
        };
        x[ov.pos * d..(ov.pos + 1) * d].copy_from_slice(&projected);
    }
    for t in 0..l {
        let row = &params.pos_embed[t * d..(t + 1) * d];
        linalg::axpy(T::one(), row, &mut x[t * d..(t + 1) * d]);
    }
    x
}

/// `out[t] = g ⊙ x[t] / rms(x[t])`, recording each row's rms in `r`.
fn rmsnorm<T: Real>(x: &[T], gains: &[T], l: usize, d: usize) -> (Vec<T>, Vec<T>) {
    let mut out = vec![T::zero(); l * d];
    let mut r = vec![T::zero(); l];
    let dim = T::c(d as f64);
    let eps = T::c(EPS_RMS);
    for t in 0..l {
        let row = &x[t * d..(t + 1) * d];
        let ms = linalg::dot(row, row) / dim;
        let rt = (ms + eps).sqrt();
        r[t] = rt;
        let inv = T::one() / rt;
        let orow = &mut out[t * d..(t + 1) * d];
        for c in 0..d {
            orow[c] = gains[c] * row[c] * inv;
        }
    }
    (out, r)
}

pub(crate) fn silu_prime<T: Real>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

/// Causal multi-head attention. Fills `probs` (softmax rows per head) and
/// `attn` (head-concatenated context vectors).
fn attention<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    l: usize,
    d: usize,
    heads: usize,
    probs: &mut [T],
    attn: &mut [T],
) {
    let dh = d / heads;
    let scale = T::c(1.0 / (dh as f64).sqrt());
    let mut kt = vec![T::zero(); dh * l];
    for h in 0..heads {
        let base = h * dh;
        for u in 0..l {
            let krow = &k[u * d + base..u * d + base + dh];
            for c in 0..dh {
                kt[c * l + u] = krow[c];
            }
        }
        let pbase = h * l * l;
        for t in 0..l {
            let prow = &mut probs[pbase + t * l..pbase + t * l + t + 1];
            let qrow = &q[t * d + base..t * d + base + dh];
            for c in 0..dh {
                linalg::axpy(qrow[c] * scale, &kt[c * l..c * l + t + 1], prow);
            }
            let mut maxv = T::neg_infinity();
            for &s in prow.iter() {
                maxv = maxv.max(s);
            }
            let mut sum = T::zero();
            for s in prow.iter_mut() {
                *s = (*s - maxv).exp();
                sum += *s;
            }
            let inv = T::one() / sum;
            for s in prow.iter_mut() {
                *s *= inv;
            }
            let prow = &probs[pbase + t * l..pbase + t * l + t + 1];
            let orow = &mut attn[t * d + base..t * d + base + dh];
            for (u, &p) in prow.iter().enumerate() {
                linalg::axpy(p, &v[u * d + base..u * d + base + dh], orow);
            }
        }
    }
}

fn layer_forward<T: Real>(
    lp: &super::LayerParams<T>,
    x_in: Vec<T>,
    l: usize,
    d: usize,
    dff: usize,
    heads: usize,
) -> (Vec<T>, LayerCache<T>) {
    let (n1, r1) = rmsnorm(&x_in, &lp.norm1_g, l, d);
    let q = matmul(&n1, &lp.wq, l, d, d);
    let k = matmul(&n1, &lp.wk, l, d, d);
    let v = matmul(&n1, &lp.wv, l, d, d);
    let mut probs = vec![T::zero(); heads * l * l];
    let mut attn = vec![T::zero(); l * d];
    attention(&q, &k, &v, l, d, heads, &mut probs, &mut attn);
    let mut h_mid = matmul(&attn, &lp.wo, l, d, d);
    linalg::axpy(T::one(), &x_in, &mut h_mid);
    let (n2, r2) = rmsnorm(&h_mid, &lp.norm2_g, l, d);
    let ffn_mid = matmul(&n2, &lp.w1, l, d, dff);
    let ffn_act: Vec<T> = ffn_mid.iter().map(|&m| m * sigmoid(m)).collect();
    let mut x_out = matmul(&ffn_act, &lp.w2, l, dff, d);
    linalg::axpy(T::one(), &h_mid, &mut x_out);
    let cache = LayerCache {
        x_in,
        n1,
        r1,
        q,
        k,
        v,
        probs,
        attn,
        h_mid,
        n2,
        r2,
        ffn_mid,
        ffn_act,
    };
    (x_out, cache)
}

/// Full forward pass; returns the final hidden states and the cache.
pub(crate) fn run_seq<T: Real>(
    params: &EncoderParams<T>,
    seq: &TokenSequence,
) -> Result<(Vec<T>, SeqCache<T>), EncoderError> {
    check_sequence(params, seq)?;
    if seq.is_empty() {
        return Err(EncoderError::Shape("empty sequence".into()));
    }
    let l = seq.ids.len();
    let d = params.cfg.d_model;
    let mut x = embed(params, seq);
    let mut layers = Vec::with_capacity(params.cfg.n_layers);
    for lp in &params.layers {
        let (x_out, cache) = layer_forward(lp, x, l, d, params.cfg.d_ff, params.cfg.n_heads);
        x = x_out;
        layers.push(cache);
    }
    Ok((x, SeqCache { layers }))
}

pub(crate) fn run_image<T: Real>(
    params: &EncoderParams<T>,
    seq: &TokenSequence,
    keep_cache: bool,
) -> Result<ImageFwd<T>, EncoderError> {
    if seq.slots.globals.is_empty() || seq.slots.text.is_some() {
        return Err(EncoderError::Shape(
            "expected an image sequence (global slots, no text slot)".into(),
        ));
    }
    if seq.slots.globals.len() != params.cfg.global_tokens as usize {
        return Err(EncoderError::Shape(format!(
            "sequence has {} global slots, config expects {}",
            seq.slots.globals.len(),
            params.cfg.global_tokens
        )));
    }
    let need_iou = params.cfg.token_mode.has_iou_token();
    for os in &seq.slots.objects {
        if os.iou_pos.is_some() != need_iou {
            return Err(EncoderError::Shape(
                "object slots do not match the configured token mode".into(),
            ));
        }
    }
    let (hidden, cache) = run_seq(params, seq)?;
    let d = params.cfg.d_model;
    let row = |p: usize| hidden[p * d..(p + 1) * d].to_vec();
    let globals = seq.slots.globals.iter().map(|&p| row(p)).collect();
    let objects: Vec<Vec<T>> = seq.slots.objects.iter().map(|os| row(os.object_pos)).collect();
    let iou_hiddens: Vec<Vec<T>> = seq
        .slots
        .objects
        .iter()
        .filter_map(|os| os.iou_pos.map(&row))
        .collect();
    Ok(ImageFwd {
        cache: keep_cache.then_some(cache),
        objects,
        iou_hiddens,
        globals,
    })
}

pub(crate) fn run_text<T: Real>(
    params: &EncoderParams<T>,
    seq: &TokenSequence,
    keep_cache: bool,
) -> Result<TextFwd<T>, EncoderError> {
    let (pos, kind) = seq
        .slots
        .text
        .ok_or_else(|| EncoderError::Shape("expected a text sequence (text slot)".into()))?;
    let (hidden, cache) = run_seq(params, seq)?;
    let d = params.cfg.d_model;
    Ok(TextFwd {
        cache: keep_cache.then_some(cache),
        emb: hidden[pos * d..(pos + 1) * d].to_vec(),
        kind,
        pos,
    })
}
