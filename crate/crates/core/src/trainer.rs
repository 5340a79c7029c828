//! Deterministic training loop: assembles supervision from synthetic scenes,
//! runs Adam with linear warmup over the combined region/image/quality
//! objective, and audits the analytic gradients against central finite
//! differences.
//!
//! Every random draw flows from `TrainConfig::seed` through per-purpose
//! sub-seeds keyed by the absolute step number, so a run can be bisected,
//! resumed from any checkpoint bit-exactly, and reproduced across thread
//! counts.

use crate::encoder::{
    batch_loss, gradients, EncoderConfig, EncoderError, EncoderParams, TrainItem,
};
use crate::geometry::{iou, patches, roi_pool, GeometryError};
use crate::layout::{
    build_global_text_sequence, build_image_sequence, build_local_text_sequence,
    instruction_family, LayoutError, TaskKind, TokenMode, Vocabulary,
};
use crate::objectives::LossConfig;
use crate::parallel;
use crate::scenegen::{
    describe_object, generate_dataset, render_features, DescribeKind, GenConfig, Scene,
    SceneGenError,
};
use crate::seeding::mix;
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::io::Write;
use thiserror::Error;

const TAG_INIT: u64 = 0x71;
const TAG_BATCH: u64 = 0x72;
const TAG_PROBE: u64 = 0x73;
const TAG_GRADCHECK: u64 = 0x74;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    Config(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    SceneGen(#[from] SceneGenError),
    #[error("diverged at step {step}: region {region}, image {image}, quality {iou}")]
    Diverged {
        step: u64,
        region: f64,
        image: f64,
        iou: f64,
    },
    #[error("log write failed: {0}")]
    Io(#[from] std::io::Error),
}

/// Optimization hyperparameters. Template switches (token mode, text-token
/// sharing, global slots, caption supervision) live in [`EncoderConfig`]
/// because they define the model the checkpoint must reload.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: u64,
    /// Images per optimizer step.
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Steps of linear ramp from 0 to the full rate; constant afterwards.
    pub warmup_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Probe the held-out split every this many steps (0 = never).
    pub eval_every: u64,
    /// Scenes at the tail of the dataset reserved for probes and evaluation.
    pub holdout_scenes: usize,
    /// Proposals subsampled per image per step (0 = use all).
    pub proposals_per_step: usize,
    /// Global gradient-norm ceiling (0 = off).
    pub grad_clip: f64,
    /// Default checkpoint location; command-line outputs override it.
    pub checkpoint_path: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            steps: 20_000,
            batch_size: 8,
            learning_rate: 3e-4,
            warmup_steps: 200,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            eval_every: 1000,
            holdout_scenes: 200,
            proposals_per_step: 16,
            grad_clip: 0.0,
            checkpoint_path: "checkpoint.obck".to_string(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let err = |m: String| Err(TrainError::Config(m));
        if self.steps == 0 {
            return err("steps must be positive".into());
        }
        if self.batch_size == 0 {
            return err("batch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0) {
            return err("learning_rate must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return err("beta1 and beta2 must lie in [0, 1)".into());
        }
        if !(self.eps > 0.0) {
            return err("eps must be positive".into());
        }
        if !(self.grad_clip >= 0.0) {
            return err("grad_clip must be nonnegative".into());
        }
        Ok(())
    }
}

/// Resumable training state: parameters plus Adam's first and second
/// moments, all in the same tensor order, and the number of completed steps.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub params: EncoderParams<f32>,
    pub m: EncoderParams<f32>,
    pub v: EncoderParams<f32>,
}

impl Checkpoint {
    /// Fresh state at step zero with seeded parameter initialization.
    pub fn init(cfg: EncoderConfig, vocab_len: usize, seed: u64) -> Result<Self, EncoderError> {
        let params = EncoderParams::<f32>::init(cfg, vocab_len, seed)?;
        let m = params.zeros_like();
        let v = params.zeros_like();
        Ok(Self { step: 0, params, m, v })
    }
}

/// Effective learning rate at 1-based step `t`.
pub fn lr_at(tc: &TrainConfig, t: u64) -> f64 {
    if tc.warmup_steps == 0 {
        return tc.learning_rate;
    }
    tc.learning_rate * ((t as f64 / tc.warmup_steps as f64).min(1.0))
}

/// One bias-corrected Adam update. Element math runs in f64 and rounds back
/// to f32 storage, so an update after a checkpoint reload is bit-identical
/// to one without the round trip.
fn adam_step(ck: &mut Checkpoint, grads: &EncoderParams<f32>, tc: &TrainConfig) {
    ck.step += 1;
    let t = ck.step;
    let lr = lr_at(tc, t);
    let bc1 = 1.0 - tc.beta1.powi(t.min(i32::MAX as u64) as i32);
    let bc2 = 1.0 - tc.beta2.powi(t.min(i32::MAX as u64) as i32);
    let g_all = grads.tensors();
    let mut p_all = ck.params.tensors_mut();
    let mut m_all = ck.m.tensors_mut();
    let mut v_all = ck.v.tensors_mut();
    for ti in 0..g_all.len() {
        let g = g_all[ti];
        let p = &mut p_all[ti];
        let m = &mut m_all[ti];
        let v = &mut v_all[ti];
        for e in 0..g.len() {
            let ge = g[e] as f64;
            let mn = tc.beta1 * m[e] as f64 + (1.0 - tc.beta1) * ge;
            let vn = tc.beta2 * v[e] as f64 + (1.0 - tc.beta2) * ge * ge;
            m[e] = mn as f32;
            v[e] = vn as f32;
            let update = lr * (m[e] as f64 / bc1) / ((v[e] as f64 / bc2).sqrt() + tc.eps);
            p[e] = (p[e] as f64 - update) as f32;
        }
    }
}

/// Scale all gradients so their global L2 norm is at most `clip`.
fn clip_gradients(grads: &mut EncoderParams<f32>, clip: f64) {
    let mut sq = 0.0f64;
    for t in grads.tensors() {
        for &g in t {
            sq += g as f64 * g as f64;
        }
    }
    let norm = sq.sqrt();
    if norm > clip {
        let scale = (clip / norm) as f32;
        for t in grads.tensors_mut() {
            for g in t.iter_mut() {
                *g *= scale;
            }
        }
    }
}

/// One supervision row: the query words and the ground-truth boxes they
/// refer to (several boxes when one class name covers several objects).
struct Row {
    words: Vec<String>,
    gt_indices: Vec<usize>,
}

/// Class rows merge same-shape objects so a proposal overlapping either of
/// two circles is a positive for the one "circle" row; referring rows are
/// one per object with a minimal unique description.
fn supervision_rows(scene: &Scene, task: TaskKind) -> Vec<Row> {
    match task {
        TaskKind::Detection => {
            let mut rows: Vec<Row> = Vec::new();
            for (i, o) in scene.objects.iter().enumerate() {
                match rows.iter_mut().find(|r| r.words[0] == o.shape) {
                    Some(row) => row.gt_indices.push(i),
                    None => rows.push(Row {
                        words: vec![o.shape.clone()],
                        gt_indices: vec![i],
                    }),
                }
            }
            rows
        }
        _ => (0..scene.objects.len())
            .map(|i| Row {
                words: describe_object(scene, i, DescribeKind::Referring),
                gt_indices: vec![i],
            })
            .collect(),
    }
}

/// Deterministic proposal subsample: every object first receives `quota`
/// draws from its own positive pool (IoU above the matching threshold), then
/// uniform fill from the rest. Returns ascending original indices.
fn subsample_proposals(
    rng: &mut ChaCha8Rng,
    scene: &Scene,
    k: usize,
    pos_threshold: f64,
) -> Vec<usize> {
    let n = scene.proposals.len();
    if k == 0 || k >= n {
        return (0..n).collect();
    }
    let n_obj = scene.objects.len();
    let mut chosen: BTreeSet<usize> = BTreeSet::new();
    let quota = if k >= 2 * n_obj { 2 } else { 1 };
    'rounds: for _ in 0..quota {
        for obj in &scene.objects {
            if chosen.len() == k {
                break 'rounds;
            }
            let pool: Vec<usize> = (0..n)
                .filter(|&j| !chosen.contains(&j) && iou(&scene.proposals[j], &obj.bbox) > pos_threshold)
                .collect();
            if !pool.is_empty() {
                chosen.insert(pool[rng.random_range(0..pool.len())]);
            }
        }
    }
    let rest: Vec<usize> = (0..n).filter(|j| !chosen.contains(j)).collect();
    let need = (k - chosen.len()).min(rest.len());
    for idx in sample_indices(rng, rest.len(), need) {
        chosen.insert(rest[idx]);
    }
    chosen.into_iter().collect()
}

/// Per-image assembly options; evaluation uses fixed instruction variant 0
/// and the full proposal set, training samples both.
struct AssembleSpec {
    task: TaskKind,
    variant: usize,
    /// Indices into `scene.proposals`.
    proposal_indices: Vec<usize>,
    /// Caption channel selection: `None` = all channels the config asks for,
    /// `Some(0)` = short, `Some(1)` = long (mix supervision).
    caption_pick: Option<usize>,
}

fn caption_words(scene: &Scene, channel: usize) -> Vec<&str> {
    let src = if channel == 0 { &scene.short } else { &scene.long };
    src.iter().map(String::as_str).collect()
}

/// Build one training item: render the feature grid, pool patch and region
/// features, lay out token sequences, and derive region/quality targets.
fn assemble_item(
    enc: &EncoderConfig,
    loss_cfg: &LossConfig,
    vocab: &Vocabulary,
    scene: &Scene,
    noise_sigma: f64,
    spec: &AssembleSpec,
) -> Result<TrainItem, TrainError> {
    let grid = render_features(scene, enc.grid_c, noise_sigma);
    let patch_feats = patches(&grid, enc.patch)?;
    let boxes: Vec<_> = spec
        .proposal_indices
        .iter()
        .map(|&j| scene.proposals[j])
        .collect();
    let mut roi_feats = Vec::with_capacity(boxes.len());
    for b in &boxes {
        roi_feats.push(roi_pool(&grid, b, enc.roi_bins)?);
    }
    let tcfg = enc.template_cfg();
    let image = build_image_sequence(vocab, &tcfg, spec.task, spec.variant, &patch_feats, &roi_feats)?;

    let rows = supervision_rows(scene, spec.task);
    let mut local_texts = Vec::with_capacity(rows.len());
    let mut region_targets = Vec::with_capacity(rows.len());
    let soft = enc.token_mode == TokenMode::SingleLabelIou;
    for row in &rows {
        let words: Vec<&str> = row.words.iter().map(String::as_str).collect();
        local_texts.push(build_local_text_sequence(vocab, &tcfg, &words)?);
        let targets: Vec<f64> = boxes
            .iter()
            .map(|b| {
                let best = row
                    .gt_indices
                    .iter()
                    .map(|&g| iou(b, &scene.objects[g].bbox))
                    .fold(0.0f64, f64::max);
                if best > loss_cfg.iou_pos_threshold {
                    if soft {
                        best
                    } else {
                        1.0
                    }
                } else {
                    0.0
                }
            })
            .collect();
        region_targets.push(targets);
    }

    let ustar: Vec<f64> = boxes
        .iter()
        .map(|b| {
            scene
                .objects
                .iter()
                .map(|o| iou(b, &o.bbox))
                .fold(0.0f64, f64::max)
        })
        .collect();
    let positives: Vec<usize> = ustar
        .iter()
        .enumerate()
        .filter(|(_, &u)| u > loss_cfg.iou_pos_threshold)
        .map(|(j, _)| j)
        .collect();

    let channels: Vec<usize> = match spec.caption_pick {
        Some(ch) => vec![ch],
        None => match enc.caption_channels() {
            2 => vec![0, 1],
            _ => vec![0],
        },
    };
    let mut captions = Vec::with_capacity(channels.len());
    for ch in channels {
        captions.push(build_global_text_sequence(vocab, &tcfg, &caption_words(scene, ch))?);
    }

    Ok(TrainItem {
        image,
        local_texts,
        region_targets,
        ustar,
        positives,
        captions,
    })
}

/// Draw one step's batch. All sampling comes from `rng` in a fixed order:
/// per image — scene pick, task coin, instruction variant, caption pick (mix
/// supervision only), proposal subsample.
fn assemble_batch(
    enc: &EncoderConfig,
    loss_cfg: &LossConfig,
    tc: &TrainConfig,
    vocab: &Vocabulary,
    scenes: &[Scene],
    noise_sigma: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<TrainItem>, TrainError> {
    use crate::encoder::CaptionMode;
    let mut items = Vec::with_capacity(tc.batch_size);
    for _ in 0..tc.batch_size {
        let scene = &scenes[rng.random_range(0..scenes.len())];
        let task = if rng.random_range(0..2u32) == 0 {
            TaskKind::Detection
        } else {
            TaskKind::Referring
        };
        let variant = rng.random_range(0..instruction_family(task).len());
        let caption_pick = match enc.caption_mode {
            CaptionMode::Mix => Some(rng.random_range(0..2usize)),
            CaptionMode::Short => Some(0),
            CaptionMode::Long => Some(1),
            CaptionMode::Both => None,
        };
        let proposal_indices = subsample_proposals(
            rng,
            scene,
            tc.proposals_per_step,
            loss_cfg.iou_pos_threshold,
        );
        let spec = AssembleSpec {
            task,
            variant,
            proposal_indices,
            caption_pick,
        };
        items.push(assemble_item(enc, loss_cfg, vocab, scene, noise_sigma, &spec)?);
    }
    Ok(items)
}

/// One line of the training log.
#[derive(Debug, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    #[serde(rename = "L_region")]
    pub l_region: f64,
    #[serde(rename = "L_image")]
    pub l_image: f64,
    #[serde(rename = "L_iou")]
    pub l_iou: f64,
    #[serde(rename = "L_total")]
    pub l_total: f64,
    /// Batch loss over the held-out probe, present on eval steps.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub probe_loss: Option<f64>,
}

/// Run (or resume) training over `scenes`, writing one JSONL record per
/// step. The final `holdout_scenes` scenes never enter training batches;
/// they feed the periodic probe loss instead.
pub fn train(
    enc: &EncoderConfig,
    loss_cfg: &LossConfig,
    tc: &TrainConfig,
    scenes: &[Scene],
    noise_sigma: f64,
    resume: Option<Checkpoint>,
    log: &mut dyn Write,
) -> Result<Checkpoint, TrainError> {
    enc.validate()?;
    tc.validate()?;
    loss_cfg
        .validate()
        .map_err(|e| TrainError::Config(e.to_string()))?;
    if scenes.is_empty() {
        return Err(TrainError::Config("dataset is empty".into()));
    }
    if tc.holdout_scenes >= scenes.len() {
        return Err(TrainError::Config(format!(
            "holdout of {} scenes leaves no training data ({} scenes total)",
            tc.holdout_scenes,
            scenes.len()
        )));
    }
    let (train_split, holdout) = scenes.split_at(scenes.len() - tc.holdout_scenes);

    let vocab = Vocabulary::build();
    let mut ck = match resume {
        Some(ck) => {
            if ck.params.cfg != *enc {
                return Err(TrainError::Config(
                    "checkpoint was trained with a different encoder config".into(),
                ));
            }
            if ck.params.vocab_len != vocab.len() {
                return Err(TrainError::Config("checkpoint vocabulary size mismatch".into()));
            }
            ck
        }
        None => Checkpoint::init(enc.clone(), vocab.len(), mix(tc.seed, TAG_INIT, 0))?,
    };
    let threads = parallel::threads_from_env();

    let probe_items: Option<Vec<TrainItem>> = if tc.eval_every > 0 && !holdout.is_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(tc.seed, TAG_PROBE, 0));
        let n = tc.batch_size.min(holdout.len());
        let mut items = Vec::with_capacity(n);
        for scene in &holdout[..n] {
            let spec = AssembleSpec {
                task: TaskKind::Detection,
                variant: 0,
                proposal_indices: subsample_proposals(
                    &mut rng,
                    scene,
                    tc.proposals_per_step,
                    loss_cfg.iou_pos_threshold,
                ),
                caption_pick: none_or_first(enc),
            };
            items.push(assemble_item(enc, loss_cfg, &vocab, scene, noise_sigma, &spec)?);
        }
        Some(items)
    } else {
        None
    };

    while ck.step < tc.steps {
        let step = ck.step; // completed steps; this iteration produces step+1
        let mut rng = ChaCha8Rng::seed_from_u64(mix(tc.seed, TAG_BATCH, step));
        let items = assemble_batch(enc, loss_cfg, tc, &vocab, train_split, noise_sigma, &mut rng)?;
        let (mut grads, parts) = match gradients(&ck.params, &items, loss_cfg, threads) {
            Ok(ok) => ok,
            Err(EncoderError::Diverged { region, image, iou }) => {
                return Err(TrainError::Diverged {
                    step: step + 1,
                    region,
                    image,
                    iou,
                })
            }
            Err(e) => return Err(e.into()),
        };
        if tc.grad_clip > 0.0 {
            clip_gradients(&mut grads, tc.grad_clip);
        }
        adam_step(&mut ck, &grads, tc);

        let probe_loss = match (&probe_items, tc.eval_every > 0 && ck.step % tc.eval_every == 0) {
            (Some(items), true) => Some(batch_loss(&ck.params, items, loss_cfg, threads)?.total),
            _ => None,
        };
        let record = LogRecord {
            step: ck.step,
            l_region: parts.region,
            l_image: parts.image,
            l_iou: parts.iou,
            l_total: parts.total,
            probe_loss,
        };
        serde_json::to_writer(&mut *log, &record).map_err(std::io::Error::other)?;
        log.write_all(b"\n")?;
    }
    log.flush()?;
    Ok(ck)
}

fn none_or_first(enc: &EncoderConfig) -> Option<usize> {
    use crate::encoder::CaptionMode;
    match enc.caption_mode {
        CaptionMode::Both => None,
        CaptionMode::Long => Some(1),
        _ => Some(0),
    }
}

/// Finite-difference audit settings. The default probe budget keeps the
/// whole audit well under a minute at d=16 while still touching every
/// tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradCheckConfig {
    pub seed: u64,
    /// Scenes in the audit batch.
    pub scenes: usize,
    /// Proposals kept per scene.
    pub proposals: usize,
    /// Elements probed per tensor (spread evenly across each tensor).
    pub per_tensor: usize,
    /// Central-difference step.
    pub step: f64,
    /// Corrupt the analytic gradients before comparing — a fixture proving
    /// the audit can fail.
    pub inject_fault: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            scenes: 2,
            proposals: 8,
            per_tensor: 48,
            step: 1e-5,
            inject_fault: false,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    /// max over probed parameters of |analytic − fd| / max(1, |analytic|).
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub n_checked: usize,
    pub n_params: usize,
    pub loss: f64,
}

/// Audit the analytic gradients of a small config against central finite
/// differences at 64-bit precision over a real assembled batch.
pub fn grad_check(
    enc: &EncoderConfig,
    loss_cfg: &LossConfig,
    gc: &GradCheckConfig,
) -> Result<GradCheckReport, TrainError> {
    enc.validate()?;
    if enc.d_model > 32 {
        return Err(TrainError::Config(format!(
            "gradient audit wants d_model <= 32, got {}",
            enc.d_model
        )));
    }
    if gc.scenes == 0 || gc.proposals == 0 || gc.per_tensor == 0 || !(gc.step > 0.0) {
        return Err(TrainError::Config("audit sizes and step must be positive".into()));
    }

    let data_cfg = GenConfig {
        seed: mix(gc.seed, TAG_GRADCHECK, 1),
        scenes: gc.scenes,
        min_objects: 1,
        max_objects: 2,
        proposals: gc.proposals.max(4),
        grid_w: enc.grid_w,
        grid_h: enc.grid_h,
        grid_c: enc.grid_c,
        ..GenConfig::default()
    };
    let scenes = generate_dataset(&data_cfg)?;
    let vocab = Vocabulary::build();
    let mut rng = ChaCha8Rng::seed_from_u64(mix(gc.seed, TAG_GRADCHECK, 2));
    let mut items = Vec::with_capacity(scenes.len());
    for (i, scene) in scenes.iter().enumerate() {
        let task = if i % 2 == 0 { TaskKind::Detection } else { TaskKind::Referring };
        let spec = AssembleSpec {
            task,
            variant: i % 3,
            proposal_indices: subsample_proposals(&mut rng, scene, gc.proposals, loss_cfg.iou_pos_threshold),
            caption_pick: none_or_first(enc),
        };
        items.push(assemble_item(enc, loss_cfg, &vocab, scene, data_cfg.noise_sigma, &spec)?);
    }

    let params = EncoderParams::<f64>::init(enc.clone(), vocab.len(), mix(gc.seed, TAG_INIT, 0))?;
    let (grads, parts) = gradients(&params, &items, loss_cfg, parallel::threads_from_env())?;

    let mut analytic: Vec<(String, Vec<f64>)> = Vec::new();
    grads.for_each_tensor(&mut |name, _, data| analytic.push((name.to_string(), data.to_vec())));
    if gc.inject_fault {
        for (_, data) in &mut analytic {
            for a in data.iter_mut() {
                *a += 0.05 * (1.0 + a.abs());
            }
        }
    }

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        n_checked: 0,
        n_params: params.n_params(),
        loss: parts.total,
    };
    let mut probe = params.clone();
    for (ti, (name, adata)) in analytic.iter().enumerate() {
        let stride = adata.len().div_ceil(gc.per_tensor).max(1);
        for e in (0..adata.len()).step_by(stride) {
            let numeric = {
                let mut eval = |delta: f64| -> Result<f64, TrainError> {
                    probe.tensors_mut()[ti][e] += delta;
                    let loss = batch_loss(&probe, &items, loss_cfg, 1)?.total;
                    probe.tensors_mut()[ti][e] -= delta;
                    Ok(loss)
                };
                let lp = eval(gc.step)?;
                let lm = eval(-gc.step)?;
                (lp - lm) / (2.0 * gc.step)
            };
            let a = adata[e];
            let rel = (a - numeric).abs() / a.abs().max(1.0);
            report.n_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = format!("{name}[{e}]");
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    Ok(report)
}
