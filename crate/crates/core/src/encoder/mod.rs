//! Causal transformer encoder whose special-token hidden states serve as
//! object, image, and text embeddings.
//!
//! The encoder is a pre-norm decoder-style transformer (RMSNorm, causal
//! multi-head attention, SiLU feed-forward, learned absolute positions).
//! Visual features enter the sequence as input-embedding overrides: patch
//! features and pooled region features are linearly projected into model
//! width and replace the token embedding at their position (position
//! embeddings still apply). After the forward pass, the hidden states at
//! designated slots are read out directly:
//!
//! * object slots -> object embeddings,
//! * quality slots -> scalar region-quality logits via a linear head,
//! * global slots -> image-level embeddings,
//! * text slots -> query/caption embeddings.
//!
//! Scoring between an object embedding and a text embedding uses a scaled
//! cosine `sigmoid(a * cos + b)` with learned scalars `a, b`, optionally
//! multiplied by the predicted region quality.
//!
//! Training gradients come from a hand-written backward pass; `gradients`
//! is validated against central finite differences in f64.

mod backward;
mod forward;
pub mod linalg;
mod loss_head;

pub use loss_head::{LossParts, TrainItem};

use crate::layout::{OverrideKind, TemplateCfg, TextKind, TokenMode, TokenSequence};
use crate::objectives::LossConfig;
use crate::parallel;
use crate::real::Real;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("invalid encoder config: {0}")]
    Config(String),
    #[error("sequence length {len} exceeds maximum {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("token id {id} outside vocabulary of size {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("{kind:?} override at position {pos} has width {got}, expected {expected}")]
    OverrideWidth {
        kind: OverrideKind,
        pos: usize,
        expected: usize,
        got: usize,
    },
    #[error("embedding has zero or non-finite norm")]
    DegenerateEmbedding,
    #[error("diverged: non-finite loss (region {region}, image {image}, quality {iou})")]
    Diverged { region: f64, image: f64, iou: f64 },
    #[error("{0}")]
    Shape(String),
}

/// Which caption(s) supervise the global image embeddings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptionMode {
    /// Short caption only (requires a single global slot).
    Short,
    /// Long caption only (requires a single global slot).
    Long,
    /// Per-image coin flip between short and long (single global slot).
    Mix,
    /// Short and long captions both; with two global slots the first slot
    /// pairs with the short caption and the second with the long one.
    Both,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    /// Feature-grid geometry the projectors are sized for.
    pub grid_w: usize,
    pub grid_h: usize,
    pub grid_c: usize,
    /// Square patch side, in grid cells.
    pub patch: usize,
    /// Pooled region features are `roi_bins x roi_bins` bins.
    pub roi_bins: usize,
    pub token_mode: TokenMode,
    pub share_text_token: bool,
    /// Number of global image slots (1 or 2).
    pub global_tokens: u32,
    pub caption_mode: CaptionMode,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            d_ff: 128,
            max_seq_len: 1024,
            grid_w: 64,
            grid_h: 64,
            grid_c: 8,
            patch: 16,
            roi_bins: 4,
            token_mode: TokenMode::DualClsIou,
            share_text_token: false,
            global_tokens: 2,
            caption_mode: CaptionMode::Both,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        let err = |m: String| Err(EncoderError::Config(m));
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return err("model dimensions must be nonzero".into());
        }
        if self.d_model % self.n_heads != 0 {
            return err(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.grid_w == 0 || self.grid_h == 0 || self.grid_c == 0 {
            return err("grid dimensions must be nonzero".into());
        }
        if self.patch == 0 || self.grid_w % self.patch != 0 || self.grid_h % self.patch != 0 {
            return err(format!(
                "patch {} must evenly divide grid {}x{}",
                self.patch, self.grid_w, self.grid_h
            ));
        }
        if self.roi_bins == 0 {
            return err("roi_bins must be nonzero".into());
        }
        if !(self.global_tokens == 1 || self.global_tokens == 2) {
            return err(format!("global_tokens must be 1 or 2, got {}", self.global_tokens));
        }
        if self.global_tokens == 2 && self.caption_mode != CaptionMode::Both {
            return err("two global slots require caption_mode = both".into());
        }
        if self.max_seq_len == 0 {
            return err("max_seq_len must be nonzero".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Flattened width of one patch feature vector.
    pub fn patch_width(&self) -> usize {
        self.patch * self.patch * self.grid_c
    }

    /// Flattened width of one pooled region feature vector.
    pub fn roi_width(&self) -> usize {
        self.roi_bins * self.roi_bins * self.grid_c
    }

    pub fn n_patches(&self) -> usize {
        (self.grid_w / self.patch) * (self.grid_h / self.patch)
    }

    pub fn template_cfg(&self) -> TemplateCfg {
        TemplateCfg {
            token_mode: self.token_mode,
            share_text_token: self.share_text_token,
            global_tokens: self.global_tokens,
        }
    }

    /// Number of caption sequences supervising each image.
    pub fn caption_channels(&self) -> usize {
        match self.caption_mode {
            CaptionMode::Both => 2,
            _ => 1,
        }
    }

    /// `(global_slot, caption_channel)` pairs that each form one
    /// batch-square image-level contrastive matrix.
    pub fn caption_pairs(&self) -> Vec<(usize, usize)> {
        match (self.global_tokens, self.caption_mode) {
            (2, CaptionMode::Both) => vec![(0, 0), (1, 1)],
            (1, CaptionMode::Both) => vec![(0, 0), (0, 1)],
            (1, _) => vec![(0, 0)],
            _ => unreachable!("validated"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub norm1_g: Vec<T>,
    pub wq: Vec<T>,
    pub wk: Vec<T>,
    pub wv: Vec<T>,
    pub wo: Vec<T>,
    pub norm2_g: Vec<T>,
    pub w1: Vec<T>,
    pub w2: Vec<T>,
}

/// All trainable tensors.
///
/// `for_each_tensor` / `for_each_tensor_mut` enumerate tensors in a fixed,
/// documented order; optimizer moments and checkpoint layout both key off
/// that order, so changing it is a breaking format change.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<T> {
    pub cfg: EncoderConfig,
    pub vocab_len: usize,
    pub tok_embed: Vec<T>,
    pub pos_embed: Vec<T>,
    pub layers: Vec<LayerParams<T>>,
    pub patch_w: Vec<T>,
    pub patch_b: Vec<T>,
    pub roi_w: Vec<T>,
    pub roi_b: Vec<T>,
    pub iou_w: Vec<T>,
    pub iou_b: T,
    pub sim_a: T,
    pub sim_b: T,
}

impl<T: Real> EncoderParams<T> {
    /// Seeded initialization: weight matrices and embeddings draw uniform
    /// values in `±1/sqrt(fan_in)` (embedding tables use the model width as
    /// fan-in), norm gains start at one, biases at zero. The quality-head
    /// bias starts at -2 and the cosine scale at `(a, b) = (10, -2)` so
    /// that early scores sit near zero probability.
    pub fn init(cfg: EncoderConfig, vocab_len: usize, seed: u64) -> Result<Self, EncoderError> {
        cfg.validate()?;
        if vocab_len == 0 {
            return Err(EncoderError::Config("empty vocabulary".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |n: usize, fan_in: usize| -> Vec<T> {
            let b = 1.0 / (fan_in as f64).sqrt();
            (0..n).map(|_| T::c(rng.random_range(-b..=b))).collect()
        };
        let d = cfg.d_model;
        let dff = cfg.d_ff;
        let tok_embed = uniform(vocab_len * d, d);
        let pos_embed = uniform(cfg.max_seq_len * d, d);
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for _ in 0..cfg.n_layers {
            layers.push(LayerParams {
                norm1_g: vec![T::one(); d],
                wq: uniform(d * d, d),
                wk: uniform(d * d, d),
                wv: uniform(d * d, d),
                wo: uniform(d * d, d),
                norm2_g: vec![T::one(); d],
                w1: uniform(d * dff, d),
                w2: uniform(dff * d, dff),
            });
        }
        let pw = cfg.patch_width();
        let rw = cfg.roi_width();
        let patch_w = uniform(pw * d, pw);
        let roi_w = uniform(rw * d, rw);
        let iou_w = uniform(d, d);
        Ok(Self {
            cfg,
            vocab_len,
            tok_embed,
            pos_embed,
            layers,
            patch_w,
            patch_b: vec![T::zero(); d],
            roi_w,
            roi_b: vec![T::zero(); d],
            iou_w,
            iou_b: T::c(-2.0),
            sim_a: T::c(10.0),
            sim_b: T::c(-2.0),
        })
    }

    /// Visit every tensor as `(name, shape, data)` in serialization order.
    pub fn for_each_tensor(&self, f: &mut impl FnMut(&str, &[usize], &[T])) {
        let d = self.cfg.d_model;
        let dff = self.cfg.d_ff;
        f("tok_embed", &[self.vocab_len, d], &self.tok_embed);
        f("pos_embed", &[self.cfg.max_seq_len, d], &self.pos_embed);
        for (l, lp) in self.layers.iter().enumerate() {
            let n = |s: &str| format!("layers.{l}.{s}");
            f(&n("norm1_g"), &[d], &lp.norm1_g);
            f(&n("wq"), &[d, d], &lp.wq);
            f(&n("wk"), &[d, d], &lp.wk);
            f(&n("wv"), &[d, d], &lp.wv);
            f(&n("wo"), &[d, d], &lp.wo);
            f(&n("norm2_g"), &[d], &lp.norm2_g);
            f(&n("w1"), &[d, dff], &lp.w1);
            f(&n("w2"), &[dff, d], &lp.w2);
        }
        f("patch_proj.w", &[self.cfg.patch_width(), d], &self.patch_w);
        f("patch_proj.b", &[d], &self.patch_b);
        f("roi_proj.w", &[self.cfg.roi_width(), d], &self.roi_w);
        f("roi_proj.b", &[d], &self.roi_b);
        f("iou_head.w", &[d], &self.iou_w);
        f("iou_head.b", &[1], core::slice::from_ref(&self.iou_b));
        f("sim.a", &[1], core::slice::from_ref(&self.sim_a));
        f("sim.b", &[1], core::slice::from_ref(&self.sim_b));
    }

    /// Mutable visitor; same tensor order as `for_each_tensor`.
    pub fn for_each_tensor_mut(&mut self, f: &mut impl FnMut(&str, &mut [T])) {
        f("tok_embed", &mut self.tok_embed);
        f("pos_embed", &mut self.pos_embed);
        for (l, lp) in self.layers.iter_mut().enumerate() {
            let n = |s: &str| format!("layers.{l}.{s}");
            f(&n("norm1_g"), &mut lp.norm1_g);
            f(&n("wq"), &mut lp.wq);
            f(&n("wk"), &mut lp.wk);
            f(&n("wv"), &mut lp.wv);
            f(&n("wo"), &mut lp.wo);
            f(&n("norm2_g"), &mut lp.norm2_g);
            f(&n("w1"), &mut lp.w1);
            f(&n("w2"), &mut lp.w2);
        }
        f("patch_proj.w", &mut self.patch_w);
        f("patch_proj.b", &mut self.patch_b);
        f("roi_proj.w", &mut self.roi_w);
        f("roi_proj.b", &mut self.roi_b);
        f("iou_head.w", &mut self.iou_w);
        f("iou_head.b", core::slice::from_mut(&mut self.iou_b));
        f("sim.a", core::slice::from_mut(&mut self.sim_a));
        f("sim.b", core::slice::from_mut(&mut self.sim_b));
    }

    /// Tensor slices in serialization order. Lets callers walk several
    /// parameter sets in lockstep (optimizer moments, gradients, audits),
    /// which the visitor closures cannot express.
    pub fn tensors(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = vec![&self.tok_embed, &self.pos_embed];
        for lp in &self.layers {
            out.push(&lp.norm1_g);
            out.push(&lp.wq);
            out.push(&lp.wk);
            out.push(&lp.wv);
            out.push(&lp.wo);
            out.push(&lp.norm2_g);
            out.push(&lp.w1);
            out.push(&lp.w2);
        }
        out.push(&self.patch_w);
        out.push(&self.patch_b);
        out.push(&self.roi_w);
        out.push(&self.roi_b);
        out.push(&self.iou_w);
        out.push(core::slice::from_ref(&self.iou_b));
        out.push(core::slice::from_ref(&self.sim_a));
        out.push(core::slice::from_ref(&self.sim_b));
        out
    }

    /// Mutable twin of [`Self::tensors`], same order.
    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = vec![&mut self.tok_embed, &mut self.pos_embed];
        for lp in &mut self.layers {
            out.push(&mut lp.norm1_g);
            out.push(&mut lp.wq);
            out.push(&mut lp.wk);
            out.push(&mut lp.wv);
            out.push(&mut lp.wo);
            out.push(&mut lp.norm2_g);
            out.push(&mut lp.w1);
            out.push(&mut lp.w2);
        }
        out.push(&mut self.patch_w);
        out.push(&mut self.patch_b);
        out.push(&mut self.roi_w);
        out.push(&mut self.roi_b);
        out.push(&mut self.iou_w);
        out.push(core::slice::from_mut(&mut self.iou_b));
        out.push(core::slice::from_mut(&mut self.sim_a));
        out.push(core::slice::from_mut(&mut self.sim_b));
        out
    }

    /// Tensor names and shapes in serialization order.
    pub fn tensor_index(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        self.for_each_tensor(&mut |name, shape, _| out.push((name.to_string(), shape.to_vec())));
        out
    }

    pub fn n_params(&self) -> usize {
        let mut n = 0;
        self.for_each_tensor(&mut |_, _, data| n += data.len());
        n
    }

    /// Same-shaped parameter set with every value zero (gradient buffer).
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.for_each_tensor_mut(&mut |_, data| data.fill(T::zero()));
        z
    }

    /// `self += other`, tensor by tensor.
    pub fn accumulate(&mut self, other: &Self) {
        fn add<T: Real>(dst: &mut [T], src: &[T]) {
            debug_assert_eq!(dst.len(), src.len());
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
        add(&mut self.tok_embed, &other.tok_embed);
        add(&mut self.pos_embed, &other.pos_embed);
        for (dl, sl) in self.layers.iter_mut().zip(&other.layers) {
            add(&mut dl.norm1_g, &sl.norm1_g);
            add(&mut dl.wq, &sl.wq);
            add(&mut dl.wk, &sl.wk);
            add(&mut dl.wv, &sl.wv);
            add(&mut dl.wo, &sl.wo);
            add(&mut dl.norm2_g, &sl.norm2_g);
            add(&mut dl.w1, &sl.w1);
            add(&mut dl.w2, &sl.w2);
        }
        add(&mut self.patch_w, &other.patch_w);
        add(&mut self.patch_b, &other.patch_b);
        add(&mut self.roi_w, &other.roi_w);
        add(&mut self.roi_b, &other.roi_b);
        add(&mut self.iou_w, &other.iou_w);
        self.iou_b += other.iou_b;
        self.sim_a += other.sim_a;
        self.sim_b += other.sim_b;
    }
}

/// Hidden-state readouts of one image sequence.
#[derive(Clone, Debug)]
pub struct EmbeddingBundle<T> {
    /// One embedding per object block, in block order.
    pub object_embs: Vec<Vec<T>>,
    /// Region-quality logits, present only in token modes with a quality slot.
    pub iou_logits: Option<Vec<T>>,
    /// Global image embeddings in template order (coarse first when two).
    pub globals: Vec<Vec<T>>,
}

impl<T> EmbeddingBundle<T> {
    pub fn global_coarse(&self) -> &[T] {
        &self.globals[0]
    }

    pub fn global_detailed(&self) -> &[T] {
        self.globals.last().expect("at least one global")
    }
}

#[derive(Clone, Debug)]
pub struct TextEmbedding<T> {
    pub vec: Vec<T>,
    pub kind: TextKind,
}

/// Decomposed object-text match score.
#[derive(Clone, Copy, Debug)]
pub struct MatchScore {
    pub p_cls: f64,
    pub p_iou: f64,
    pub score: f64,
}

fn check_sequence<T: Real>(params: &EncoderParams<T>, seq: &TokenSequence) -> Result<(), EncoderError> {
    let len = seq.ids.len();
    if len > params.cfg.max_seq_len {
        return Err(EncoderError::SequenceTooLong {
            len,
            max: params.cfg.max_seq_len,
        });
    }
    for &id in &seq.ids {
        if id as usize >= params.vocab_len {
            return Err(EncoderError::TokenOutOfRange {
                id,
                vocab: params.vocab_len,
            });
        }
    }
    for ov in &seq.overrides {
        if ov.pos >= len {
            return Err(EncoderError::Shape(format!(
                "override position {} outside sequence of length {len}",
                ov.pos
            )));
        }
        let expected = match ov.kind {
            OverrideKind::Patch => params.cfg.patch_width(),
            OverrideKind::Roi => params.cfg.roi_width(),
        };
        if ov.feat.len() != expected {
            return Err(EncoderError::OverrideWidth {
                kind: ov.kind,
                pos: ov.pos,
                expected,
                got: ov.feat.len(),
            });
        }
    }
    Ok(())
}

/// Linear quality head applied to a quality-slot hidden state.
fn iou_logit_of<T: Real>(params: &EncoderParams<T>, hidden_row: &[T]) -> T {
    linalg::dot(&params.iou_w, hidden_row) + params.iou_b
}

/// Run the encoder over an image sequence and read out its slots.
pub fn encode_image<T: Real>(
    params: &EncoderParams<T>,
    seq: &TokenSequence,
) -> Result<EmbeddingBundle<T>, EncoderError> {
    let fwd = forward::run_image(params, seq, false)?;
    Ok(bundle_of(params, &fwd))
}

fn bundle_of<T: Real>(params: &EncoderParams<T>, fwd: &forward::ImageFwd<T>) -> EmbeddingBundle<T> {
    let iou_logits = params.cfg.token_mode.has_iou_token().then(|| {
        fwd.iou_hiddens
            .iter()
            .map(|h| iou_logit_of(params, h.as_slice()))
            .collect()
    });
    EmbeddingBundle {
        object_embs: fwd.objects.clone(),
        iou_logits,
        globals: fwd.globals.clone(),
    }
}

/// Run the encoder over a text sequence and read out the text slot.
pub fn encode_text<T: Real>(
    params: &EncoderParams<T>,
    seq: &TokenSequence,
) -> Result<TextEmbedding<T>, EncoderError> {
    let fwd = forward::run_text(params, seq, false)?;
    Ok(TextEmbedding {
        vec: fwd.emb.clone(),
        kind: fwd.kind,
    })
}

/// Cosine similarity between two embeddings.
pub fn similarity<T: Real>(a: &[T], b: &[T]) -> Result<T, EncoderError> {
    if a.len() != b.len() {
        return Err(EncoderError::Shape(format!(
            "embedding widths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let na = linalg::norm(a);
    let nb = linalg::norm(b);
    if !(na > T::zero()) || !(nb > T::zero()) || !na.is_finite() || !nb.is_finite() {
        return Err(EncoderError::DegenerateEmbedding);
    }
    Ok(linalg::dot(a, b) / (na * nb))
}

/// Combined match score between an object and a text embedding:
/// `sigmoid(a*cos + b)`, multiplied by the region quality probability when a
/// quality logit is available.
pub fn match_score<T: Real>(
    params: &EncoderParams<T>,
    object_emb: &[T],
    iou_logit: Option<T>,
    text_emb: &[T],
) -> Result<MatchScore, EncoderError> {
    let cos = similarity(object_emb, text_emb)?.f64();
    let a = params.sim_a.f64();
    let b = params.sim_b.f64();
    let p_cls = crate::objectives::sigmoid(a * cos + b);
    let p_iou = match iou_logit {
        Some(l) => crate::objectives::sigmoid(l.f64()),
        None => 1.0,
    };
    Ok(MatchScore {
        p_cls,
        p_iou,
        score: p_cls * p_iou,
    })
}

/// Project a pooled region feature vector into model width (the same map the
/// encoder applies to region overrides ahead of position embeddings).
pub fn project_roi<T: Real>(params: &EncoderParams<T>, feat: &[f32]) -> Result<Vec<T>, EncoderError> {
    if feat.len() != params.cfg.roi_width() {
        return Err(EncoderError::Shape(format!(
            "region feature width {} != {}",
            feat.len(),
            params.cfg.roi_width()
        )));
    }
    Ok(forward::project(feat, &params.roi_w, &params.roi_b, params.cfg.d_model))
}

/// Project a patch feature vector into model width.
pub fn project_patch<T: Real>(params: &EncoderParams<T>, feat: &[f32]) -> Result<Vec<T>, EncoderError> {
    if feat.len() != params.cfg.patch_width() {
        return Err(EncoderError::Shape(format!(
            "patch feature width {} != {}",
            feat.len(),
            params.cfg.patch_width()
        )));
    }
    Ok(forward::project(feat, &params.patch_w, &params.patch_b, params.cfg.d_model))
}

/// Loss over a batch without gradients (used by finite-difference audits).
pub fn batch_loss<T: Real>(
    params: &EncoderParams<T>,
    items: &[TrainItem],
    loss_cfg: &LossConfig,
    threads: usize,
) -> Result<LossParts, EncoderError> {
    let fwds = forward_batch(params, items, threads)?;
    let (parts, _) = loss_head::run(params, items, &fwds, loss_cfg)?;
    Ok(parts)
}

/// Batch loss plus gradients for every parameter tensor.
///
/// Work is split into three stages so the batch-coupled loss head stays
/// sequential while per-sequence forward/backward passes can fan out over
/// `threads` (results are reduced in item order, so the number of threads
/// never changes the output bits).
pub fn gradients<T: Real>(
    params: &EncoderParams<T>,
    items: &[TrainItem],
    loss_cfg: &LossConfig,
    threads: usize,
) -> Result<(EncoderParams<T>, LossParts), EncoderError> {
    let fwds = forward_batch(params, items, threads)?;
    let (parts, head_grads) = loss_head::run(params, items, &fwds, loss_cfg)?;
    if !parts.total.is_finite() {
        return Err(EncoderError::Diverged {
            region: parts.region,
            image: parts.image,
            iou: parts.iou,
        });
    }

    let jobs: Vec<usize> = (0..items.len()).collect();
    let grads_per_item = parallel::map_ordered(&jobs, threads, |_, &i| {
        let mut g = params.zeros_like();
        backward::run_item(params, &items[i], &fwds[i], &head_grads.items[i], &mut g);
        g
    });
    let mut grads = match grads_per_item.into_iter().reduce(|mut acc, g| {
        acc.accumulate(&g);
        acc
    }) {
        Some(g) => g,
        None => return Err(EncoderError::Shape("empty batch".into())),
    };
    grads.iou_w
        .iter_mut()
        .zip(&head_grads.d_iou_w)
        .for_each(|(g, &h)| *g += h);
    grads.iou_b += head_grads.d_iou_b;
    grads.sim_a += head_grads.d_sim_a;
    grads.sim_b += head_grads.d_sim_b;
    Ok((grads, parts))
}

fn forward_batch<T: Real>(
    params: &EncoderParams<T>,
    items: &[TrainItem],
    threads: usize,
) -> Result<Vec<loss_head::ItemFwd<T>>, EncoderError> {
    if items.is_empty() {
        return Err(EncoderError::Shape("empty batch".into()));
    }
    let results = parallel::map_ordered(items, threads, |_, item| loss_head::forward_item(params, item));
    results.into_iter().collect()
}
