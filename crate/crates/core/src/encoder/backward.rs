//! Hand-written backward pass. Mirrors `forward.rs` layer by layer; every
//! derivative here is validated against central finite differences by the
//! gradient-audit tests.

use super::forward::{silu_prime, LayerCache, SeqCache, EPS_RMS};
use super::linalg::{self, grad_weights_acc, matmul, transpose};
use super::loss_head::{ItemFwd, ItemSlotGrads};
use super::{EncoderParams, LayerParams, TrainItem};
use crate::layout::{OverrideKind, TokenSequence};
use crate::real::Real;

/// `dgains += dy ⊙ x / r`, `dx_acc +=` the input gradient of rmsnorm.
fn rmsnorm_backward<T: Real>(
    dy: &[T],
    x: &[T],
    gains: &[T],
    r: &[T],
    dgains: &mut [T],
    dx_acc: &mut [T],
    l: usize,
    d: usize,
) {
    let dim = T::c(d as f64);
    let _ = EPS_RMS; // eps is additive under the root; it has no gradient term
    for t in 0..l {
        let xr = &x[t * d..(t + 1) * d];
        let dyr = &dy[t * d..(t + 1) * d];
        let rt = r[t];
        let inv = T::one() / rt;
        // u = x / r; du = dy ⊙ g; dx = du/r − x · (du·x) / (d·r³)
        let mut s = T::zero();
        for c in 0..d {
            dgains[c] += dyr[c] * xr[c] * inv;
            s += dyr[c] * gains[c] * xr[c];
        }
        let coef = s / (dim * rt * rt * rt);
        let dxr = &mut dx_acc[t * d..(t + 1) * d];
        for c in 0..d {
            dxr[c] += dyr[c] * gains[c] * inv - xr[c] * coef;
        }
    }
}

/// Backward through causal multi-head attention (scores already scaled by
/// `1/sqrt(head_dim)` in the forward pass, so the same factor lands on the
/// score gradients here).
#[allow(clippy::too_many_arguments)]
fn attention_backward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    d_attn: &[T],
    dq: &mut [T],
    dk: &mut [T],
    dv: &mut [T],
    l: usize,
    d: usize,
    heads: usize,
) {
    let dh = d / heads;
    let scale = T::c(1.0 / (dh as f64).sqrt());
    let mut vt = vec![T::zero(); dh * l];
    let mut dp = vec![T::zero(); l];
    let mut ds = vec![T::zero(); l];
    for h in 0..heads {
        let base = h * dh;
        for u in 0..l {
            let vrow = &v[u * d + base..u * d + base + dh];
            for c in 0..dh {
                vt[c * l + u] = vrow[c];
            }
        }
        let pbase = h * l * l;
        for t in 0..l {
            let prow = &probs[pbase + t * l..pbase + t * l + t + 1];
            let darow = &d_attn[t * d + base..t * d + base + dh];
            // dP[t,u] = d_attn[t]·v[u]
            let dprow = &mut dp[..t + 1];
            dprow.fill(T::zero());
            for c in 0..dh {
                linalg::axpy(darow[c], &vt[c * l..c * l + t + 1], dprow);
            }
            // dv[u] += P[t,u]·d_attn[t]
            for (u, &p) in prow.iter().enumerate() {
                linalg::axpy(p, darow, &mut dv[u * d + base..u * d + base + dh]);
            }
            // softmax backward, then the score scale
            let mut inner = T::zero();
            for u in 0..=t {
                inner += prow[u] * dprow[u];
            }
            let dsrow = &mut ds[..t + 1];
            for u in 0..=t {
                dsrow[u] = prow[u] * (dprow[u] - inner) * scale;
            }
            // dq[t] += Σ_u dS[t,u]·k[u];  dk[u] += dS[t,u]·q[t]
            let qrow = &q[t * d + base..t * d + base + dh];
            let dqrow_start = t * d + base;
            for u in 0..=t {
                linalg::axpy(dsrow[u], &k[u * d + base..u * d + base + dh], &mut dq[dqrow_start..dqrow_start + dh]);
                linalg::axpy(dsrow[u], qrow, &mut dk[u * d + base..u * d + base + dh]);
            }
        }
    }
}

fn layer_backward<T: Real>(
    lp: &LayerParams<T>,
    cache: &LayerCache<T>,
    dx_out: Vec<T>,
    g: &mut LayerParams<T>,
    d: usize,
    dff: usize,
    heads: usize,
) -> Vec<T> {
    let l = cache.r1.len();
    // x_out = h_mid + silu(n2·W1)·W2
    let w2t = transpose(&lp.w2, dff, d);
    let d_ffn_act = matmul(&dx_out, &w2t, l, d, dff);
    grad_weights_acc(&cache.ffn_act, &dx_out, &mut g.w2, l, dff, d);
    let mut d_ffn_mid = d_ffn_act;
    for (dm, &m) in d_ffn_mid.iter_mut().zip(&cache.ffn_mid) {
        *dm *= silu_prime(m);
    }
    let w1t = transpose(&lp.w1, d, dff);
    let d_n2 = matmul(&d_ffn_mid, &w1t, l, dff, d);
    grad_weights_acc(&cache.n2, &d_ffn_mid, &mut g.w1, l, d, dff);
    let mut d_h_mid = dx_out; // residual branch
    rmsnorm_backward(&d_n2, &cache.h_mid, &lp.norm2_g, &cache.r2, &mut g.norm2_g, &mut d_h_mid, l, d);

    // h_mid = x_in + attn·Wo
    let wot = transpose(&lp.wo, d, d);
    let d_attn = matmul(&d_h_mid, &wot, l, d, d);
    grad_weights_acc(&cache.attn, &d_h_mid, &mut g.wo, l, d, d);
    let mut dq = vec![T::zero(); l * d];
    let mut dk = vec![T::zero(); l * d];
    let mut dv = vec![T::zero(); l * d];
    attention_backward(
        &cache.q, &cache.k, &cache.v, &cache.probs, &d_attn, &mut dq, &mut dk, &mut dv, l, d, heads,
    );
    // q/k/v = n1 · Wq/Wk/Wv
    let mut d_n1 = matmul(&dq, &transpose(&lp.wq, d, d), l, d, d);
    linalg::matmul_acc(&dk, &transpose(&lp.wk, d, d), &mut d_n1, l, d, d);
    linalg::matmul_acc(&dv, &transpose(&lp.wv, d, d), &mut d_n1, l, d, d);
    grad_weights_acc(&cache.n1, &dq, &mut g.wq, l, d, d);
    grad_weights_acc(&cache.n1, &dk, &mut g.wk, l, d, d);
    grad_weights_acc(&cache.n1, &dv, &mut g.wv, l, d, d);
    let mut dx_in = d_h_mid; // residual branch
    rmsnorm_backward(&d_n1, &cache.x_in, &lp.norm1_g, &cache.r1, &mut g.norm1_g, &mut dx_in, l, d);
    dx_in
}

fn embed_backward<T: Real>(
    params: &EncoderParams<T>,
    seq: &TokenSequence,
    d_x0: &[T],
    grads: &mut EncoderParams<T>,
) {
    let d = params.cfg.d_model;
    let l = seq.ids.len();
    let mut overridden = vec![false; l];
    for ov in &seq.overrides {
        overridden[ov.pos] = true;
        let drow = &d_x0[ov.pos * d..(ov.pos + 1) * d];
        let (w, b) = match ov.kind {
            OverrideKind::Patch => (&mut grads.patch_w, &mut grads.patch_b),
            OverrideKind::Roi => (&mut grads.roi_w, &mut grads.roi_b),
        };
        for (p, &fv) in ov.feat.iter().enumerate() {
            linalg::axpy(T::c(fv as f64), drow, &mut w[p * d..(p + 1) * d]);
        }
        linalg::axpy(T::one(), drow, b);
    }
    for (t, &id) in seq.ids.iter().enumerate() {
        let drow = &d_x0[t * d..(t + 1) * d];
        linalg::axpy(T::one(), drow, &mut grads.pos_embed[t * d..(t + 1) * d]);
        if !overridden[t] {
            let row = &mut grads.tok_embed[id as usize * d..(id as usize + 1) * d];
            linalg::axpy(T::one(), drow, row);
        }
    }
}

/// Backward through one sequence given the gradient on its final hidden
/// states.
fn run_seq_backward<T: Real>(
    params: &EncoderParams<T>,
    seq: &TokenSequence,
    cache: &SeqCache<T>,
    d_hidden: Vec<T>,
    grads: &mut EncoderParams<T>,
) {
    let d = params.cfg.d_model;
    let dff = params.cfg.d_ff;
    let heads = params.cfg.n_heads;
    let mut dx = d_hidden;
    for (lp, (lc, lg)) in params
        .layers
        .iter()
        .zip(cache.layers.iter().zip(grads.layers.iter_mut()))
        .rev()
    {
        dx = layer_backward(lp, lc, dx, lg, d, dff, heads);
    }
    embed_backward(params, seq, &dx, grads);
}

/// Scatter a slot gradient into a dense hidden-state gradient buffer.
fn add_at<T: Real>(d_hidden: &mut [T], pos: usize, d: usize, grad: &[T]) {
    linalg::axpy(T::one(), grad, &mut d_hidden[pos * d..(pos + 1) * d]);
}

/// Backward for every sequence of one batch item, accumulating parameter
/// gradients into `grads`.
pub(crate) fn run_item<T: Real>(
    params: &EncoderParams<T>,
    item: &TrainItem,
    fwd: &ItemFwd<T>,
    sg: &ItemSlotGrads<T>,
    grads: &mut EncoderParams<T>,
) {
    let d = params.cfg.d_model;
    // Image sequence: objects, quality slots, globals.
    {
        let l = item.image.ids.len();
        let mut dh = vec![T::zero(); l * d];
        for (os, dobj) in item.image.slots.objects.iter().zip(&sg.d_objects) {
            add_at(&mut dh, os.object_pos, d, dobj);
        }
        let mut iou_idx = 0;
        for os in &item.image.slots.objects {
            if let Some(p) = os.iou_pos {
                add_at(&mut dh, p, d, &sg.d_iou_slots[iou_idx]);
                iou_idx += 1;
            }
        }
        for (&p, dglob) in item.image.slots.globals.iter().zip(&sg.d_globals) {
            add_at(&mut dh, p, d, dglob);
        }
        let cache = fwd.image.cache.as_ref().expect("training forward keeps caches");
        run_seq_backward(params, &item.image, cache, dh, grads);
    }
    for ((seq, tf), dtext) in item.local_texts.iter().zip(&fwd.locals).zip(&sg.d_locals) {
        let mut dh = vec![T::zero(); seq.ids.len() * d];
        add_at(&mut dh, tf.pos, d, dtext);
        let cache = tf.cache.as_ref().expect("training forward keeps caches");
        run_seq_backward(params, seq, cache, dh, grads);
    }
    for ((seq, tf), dtext) in item.captions.iter().zip(&fwd.captions).zip(&sg.d_captions) {
        let mut dh = vec![T::zero(); seq.ids.len() * d];
        add_at(&mut dh, tf.pos, d, dtext);
        let cache = tf.cache.as_ref().expect("training forward keeps caches");
        run_seq_backward(params, seq, cache, dh, grads);
    }
}
