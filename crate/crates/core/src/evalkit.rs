//! Task pipelines and metrics: detection scoring with COCO-style AP/AR,
//! referring-expression accuracy, object-level and global image retrieval,
//! recall@k / mAP@k, and rank correlation for the quality head.
//!
//! Matching and ranking are deterministic: score ties break toward earlier
//! construction order, greedy matching ties break toward the lower
//! ground-truth index, and retrieval ties break toward the lower image id.

use crate::encoder::{
    encode_image, encode_text, match_score, EmbeddingBundle, EncoderError, EncoderParams,
};
use crate::geometry::{
    area_bucket, iou, nms, patches, roi_pool, AreaBucket, BBox, GeometryError,
};
use crate::io::GalleryEntry;
use crate::layout::{
    build_global_text_sequence, build_image_sequence, build_local_text_sequence, LayoutError,
    TaskKind, Vocabulary,
};
use crate::scenegen::{describe_object, render_features, DescribeKind, Scene};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("invalid evaluation input: {0}")]
    Input(String),
}

fn input(msg: impl Into<String>) -> EvalError {
    EvalError::Input(msg.into())
}

/// IoU thresholds 0.50, 0.55, …, 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (50..=95).step_by(5).map(|i| i as f64 / 100.0).collect()
}

/// One scored box for one query. The box is the proposal's box, unmodified.
#[derive(Clone, Debug)]
pub struct Detection {
    pub image_id: u64,
    pub bbox: BBox,
    pub query_id: usize,
    pub score: f64,
}

#[derive(Clone, Debug)]
pub struct GroundTruth {
    pub image_id: u64,
    pub bbox: BBox,
    pub query_id: usize,
}

// ---------------------------------------------------------------------------
// Greedy matching shared by AP and AR.
// ---------------------------------------------------------------------------

/// Order detections by score descending; ties keep construction order.
fn score_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    order
}

#[derive(Clone, Copy, PartialEq)]
enum Outcome {
    Tp,
    Fp,
    /// Excluded from the PR curve (matched an out-of-bucket GT, or unmatched
    /// with the detection's own area outside the bucket).
    Ignored,
}

/// Greedy matching at one IoU threshold. Walks detections in descending
/// score; each takes the unmatched same-(image, query) GT with the highest
/// IoU ≥ `thr`, preferring active GTs over ignored ones; equal IoU breaks
/// toward the lower GT index. Returns per-detection outcomes aligned with
/// `order` plus the number of GTs matched to active slots.
fn greedy_match(
    dets: &[Detection],
    order: &[usize],
    gts: &[GroundTruth],
    thr: f64,
    gt_active: &[bool],
    det_active: impl Fn(&Detection) -> bool,
) -> (Vec<Outcome>, usize) {
    let mut by_group: BTreeMap<(u64, usize), Vec<usize>> = BTreeMap::new();
    for (g, gt) in gts.iter().enumerate() {
        by_group.entry((gt.image_id, gt.query_id)).or_default().push(g);
    }
    let mut gt_taken = vec![false; gts.len()];
    let mut outcomes = Vec::with_capacity(order.len());
    let mut matched_active = 0usize;
    for &di in order {
        let det = &dets[di];
        let empty = Vec::new();
        let group = by_group.get(&(det.image_id, det.query_id)).unwrap_or(&empty);
        let best_of = |want_active: bool, taken: &[bool]| -> Option<usize> {
            let mut best: Option<(usize, f64)> = None;
            for &g in group {
                if taken[g] || gt_active[g] != want_active {
                    continue;
                }
                let v = iou(&det.bbox, &gts[g].bbox);
                if v >= thr && best.map_or(true, |(_, bv)| v > bv) {
                    best = Some((g, v));
                }
            }
            best.map(|(g, _)| g)
        };
        let outcome = match best_of(true, &gt_taken) {
            Some(g) => {
                gt_taken[g] = true;
                matched_active += 1;
                Outcome::Tp
            }
            None => match best_of(false, &gt_taken) {
                Some(g) => {
                    gt_taken[g] = true;
                    Outcome::Ignored
                }
                None if !det_active(det) => Outcome::Ignored,
                None => Outcome::Fp,
            },
        };
        outcomes.push(outcome);
    }
    (outcomes, matched_active)
}

/// 101-point interpolated AP from a matched detection sequence.
fn interpolated_ap(outcomes: &[Outcome], n_gt: usize) -> f64 {
    debug_assert!(n_gt > 0);
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for o in outcomes {
        match o {
            Outcome::Tp => tp += 1,
            Outcome::Fp => fp += 1,
            Outcome::Ignored => continue,
        }
        points.push((tp as f64 / n_gt as f64, tp as f64 / (tp + fp) as f64));
    }
    // Max precision over the suffix: precision at recall ≥ r.
    let mut suffix_max = vec![0.0f64; points.len() + 1];
    for i in (0..points.len()).rev() {
        suffix_max[i] = points[i].1.max(suffix_max[i + 1]);
    }
    let mut total = 0.0;
    for i in 0..=100 {
        let r = i as f64 / 100.0;
        let first = points.partition_point(|&(rec, _)| rec < r);
        total += suffix_max[first];
    }
    total / 101.0
}

fn bucket_of(b: &BBox) -> AreaBucket {
    area_bucket(b)
}

fn ap_at(
    dets: &[Detection],
    order: &[usize],
    gts: &[GroundTruth],
    thr: f64,
    bucket: Option<AreaBucket>,
) -> Option<f64> {
    let gt_active: Vec<bool> = gts
        .iter()
        .map(|g| bucket.is_none_or(|wanted| bucket_of(&g.bbox) == wanted))
        .collect();
    let n_gt = gt_active.iter().filter(|&&a| a).count();
    if n_gt == 0 {
        return None;
    }
    let (outcomes, _) = greedy_match(dets, order, gts, thr, &gt_active, |d| {
        bucket.is_none_or(|wanted| bucket_of(&d.bbox) == wanted)
    });
    Some(interpolated_ap(&outcomes, n_gt))
}

/// COCO-style detection AP averaged over IoU thresholds, with size splits.
/// A size split is `None` when no ground truth falls in that bucket.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct DetectionEval {
    pub ap: f64,
    pub ap_small: Option<f64>,
    pub ap_medium: Option<f64>,
    pub ap_large: Option<f64>,
}

pub fn coco_ap(
    dets: &[Detection],
    gts: &[GroundTruth],
    thresholds: &[f64],
) -> Result<DetectionEval, EvalError> {
    if gts.is_empty() {
        return Err(input("no ground truth boxes"));
    }
    if thresholds.is_empty() {
        return Err(input("no IoU thresholds"));
    }
    let order = score_order(dets);
    let mean_over = |bucket: Option<AreaBucket>| -> Option<f64> {
        let vals: Vec<f64> = thresholds
            .iter()
            .filter_map(|&t| ap_at(dets, &order, gts, t, bucket))
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };
    Ok(DetectionEval {
        ap: mean_over(None).expect("gts nonempty"),
        ap_small: mean_over(Some(AreaBucket::Small)),
        ap_medium: mean_over(Some(AreaBucket::Medium)),
        ap_large: mean_over(Some(AreaBucket::Large)),
    })
}

/// Recall averaged over IoU thresholds with at most `max_dets` detections
/// kept per image (by score).
pub fn average_recall(
    dets: &[Detection],
    gts: &[GroundTruth],
    thresholds: &[f64],
    max_dets: usize,
) -> Result<f64, EvalError> {
    if gts.is_empty() {
        return Err(input("no ground truth boxes"));
    }
    if thresholds.is_empty() {
        return Err(input("no IoU thresholds"));
    }
    let mut per_image: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, d) in dets.iter().enumerate() {
        per_image.entry(d.image_id).or_default().push(i);
    }
    let mut kept: Vec<Detection> = Vec::new();
    for (_, mut ids) in per_image {
        ids.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
        ids.truncate(max_dets);
        ids.sort_unstable();
        kept.extend(ids.into_iter().map(|i| dets[i].clone()));
    }
    let order = score_order(&kept);
    let all_active = vec![true; gts.len()];
    let mut total = 0.0;
    for &t in thresholds {
        let (_, matched) = greedy_match(&kept, &order, gts, t, &all_active, |_| true);
        total += matched as f64 / gts.len() as f64;
    }
    Ok(total / thresholds.len() as f64)
}

/// Class-agnostic box recall of the proposal sets themselves (no model):
/// every proposal counts as a detection for a single shared query.
pub fn box_recall(
    scenes: &[Scene],
    thresholds: &[f64],
    max_dets: usize,
) -> Result<f64, EvalError> {
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for scene in scenes {
        for &p in &scene.proposals {
            dets.push(Detection {
                image_id: scene.id,
                bbox: p,
                query_id: 0,
                score: 1.0,
            });
        }
        for o in &scene.objects {
            gts.push(GroundTruth {
                image_id: scene.id,
                bbox: o.bbox,
                query_id: 0,
            });
        }
    }
    average_recall(&dets, &gts, thresholds, max_dets)
}

/// Overwrite each scene's final `n_objects` proposal slots with the ground
/// truth boxes, guaranteeing every object an exact-IoU proposal while
/// keeping the proposal count unchanged.
pub fn plant_gt_proposals(scenes: &mut [Scene]) {
    for scene in scenes {
        let n = scene.proposals.len();
        let k = scene.objects.len().min(n);
        for (i, o) in scene.objects.iter().take(k).enumerate() {
            scene.proposals[n - k + i] = o.bbox;
        }
    }
}

// ---------------------------------------------------------------------------
// Scene-driven pipelines.
// ---------------------------------------------------------------------------

/// Encode one scene's image sequence (instruction variant 0 — evaluation
/// never samples instructions).
pub fn embed_scene(
    params: &EncoderParams<f32>,
    scene: &Scene,
    task: TaskKind,
    noise_sigma: f64,
) -> Result<EmbeddingBundle<f32>, EvalError> {
    let cfg = &params.cfg;
    let grid = render_features(scene, cfg.grid_c, noise_sigma);
    let patch_feats = patches(&grid, cfg.patch)?;
    let mut roi_feats = Vec::with_capacity(scene.proposals.len());
    for b in &scene.proposals {
        roi_feats.push(roi_pool(&grid, b, cfg.roi_bins)?);
    }
    let vocab = Vocabulary::build();
    let seq = build_image_sequence(&vocab, &cfg.template_cfg(), task, 0, &patch_feats, &roi_feats)?;
    Ok(encode_image(params, &seq)?)
}

/// Build the gallery record for one scene: object embeddings in proposal
/// order, quality logits (`+inf` when the token mode has no quality slot),
/// and the two global rows (coarse, detailed).
pub fn gallery_entry(
    params: &EncoderParams<f32>,
    scene: &Scene,
    noise_sigma: f64,
) -> Result<GalleryEntry, EvalError> {
    let bundle = embed_scene(params, scene, TaskKind::Detection, noise_sigma)?;
    let d = params.cfg.d_model;
    let n = bundle.object_embs.len();
    let mut objects = Vec::with_capacity(n * d);
    for e in &bundle.object_embs {
        objects.extend_from_slice(e);
    }
    let iou_logits = match &bundle.iou_logits {
        Some(l) => l.clone(),
        None => vec![f32::INFINITY; n],
    };
    let mut globals = Vec::with_capacity(2 * d);
    globals.extend_from_slice(bundle.global_coarse());
    globals.extend_from_slice(bundle.global_detailed());
    Ok(GalleryEntry {
        id: scene.id,
        boxes: scene
            .proposals
            .iter()
            .map(|b| [b.x1 as f32, b.y1 as f32, b.x2 as f32, b.y2 as f32])
            .collect(),
        objects,
        iou_logits,
        globals,
    })
}

fn region_scores(
    params: &EncoderParams<f32>,
    bundle: &EmbeddingBundle<f32>,
    text_emb: &[f32],
) -> Result<Vec<f64>, EvalError> {
    let mut scores = Vec::with_capacity(bundle.object_embs.len());
    for (j, emb) in bundle.object_embs.iter().enumerate() {
        let logit = bundle.iou_logits.as_ref().map(|l| l[j]);
        scores.push(match_score(params, emb, logit, text_emb)?.score);
    }
    Ok(scores)
}

/// Encode query words through the object-description text template.
pub fn local_text_embedding(
    params: &EncoderParams<f32>,
    words: &[String],
) -> Result<Vec<f32>, EvalError> {
    let vocab = Vocabulary::build();
    let as_str: Vec<&str> = words.iter().map(String::as_str).collect();
    let seq = build_local_text_sequence(&vocab, &params.cfg.template_cfg(), &as_str)?;
    Ok(encode_text(params, &seq)?.vec)
}

/// Encode query words through the caption text template.
pub fn global_text_embedding(
    params: &EncoderParams<f32>,
    words: &[String],
) -> Result<Vec<f32>, EvalError> {
    let vocab = Vocabulary::build();
    let as_str: Vec<&str> = words.iter().map(String::as_str).collect();
    let seq = build_global_text_sequence(&vocab, &params.cfg.template_cfg(), &as_str)?;
    Ok(encode_text(params, &seq)?.vec)
}

/// Score every (proposal, query) pair for one scene; per-query NMS when
/// `nms_iou` is set, then the per-image cap, both by descending score.
pub fn detect(
    params: &EncoderParams<f32>,
    scene: &Scene,
    queries: &[Vec<String>],
    noise_sigma: f64,
    nms_iou: Option<f64>,
    max_per_image: usize,
) -> Result<Vec<Detection>, EvalError> {
    let bundle = embed_scene(params, scene, TaskKind::Detection, noise_sigma)?;
    let mut dets: Vec<Detection> = Vec::new();
    for (qi, words) in queries.iter().enumerate() {
        let text = local_text_embedding(params, words)?;
        let scores = region_scores(params, &bundle, &text)?;
        let mut q_dets: Vec<Detection> = scores
            .into_iter()
            .zip(&scene.proposals)
            .map(|(score, &bbox)| Detection {
                image_id: scene.id,
                bbox,
                query_id: qi,
                score,
            })
            .collect();
        if let Some(thr) = nms_iou {
            let boxes: Vec<BBox> = q_dets.iter().map(|d| d.bbox).collect();
            let scores: Vec<f64> = q_dets.iter().map(|d| d.score).collect();
            let mut keep = nms(&boxes, &scores, thr);
            keep.sort_unstable();
            q_dets = keep.into_iter().map(|i| q_dets[i].clone()).collect();
        }
        dets.extend(q_dets);
    }
    let order = score_order(&dets);
    Ok(order
        .into_iter()
        .take(max_per_image)
        .map(|i| dets[i].clone())
        .collect())
}

/// Referring-expression accuracy: for each object's unique description the
/// top-scoring proposal must overlap that object above IoU 0.5 (strict).
/// Scenes without proposals count their queries as incorrect.
pub fn rec_accuracy(
    params: &EncoderParams<f32>,
    scenes: &[Scene],
    noise_sigma: f64,
) -> Result<f64, EvalError> {
    let mut total = 0usize;
    let mut correct = 0usize;
    for scene in scenes {
        if scene.objects.is_empty() {
            continue;
        }
        if scene.proposals.is_empty() {
            total += scene.objects.len();
            continue;
        }
        let bundle = embed_scene(params, scene, TaskKind::Referring, noise_sigma)?;
        for (i, obj) in scene.objects.iter().enumerate() {
            let words = describe_object(scene, i, DescribeKind::Referring);
            let text = local_text_embedding(params, &words)?;
            let scores = region_scores(params, &bundle, &text)?;
            let top = scores
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
                .map(|(j, _)| j)
                .expect("nonempty proposals");
            total += 1;
            if iou(&scene.proposals[top], &obj.bbox) > 0.5 {
                correct += 1;
            }
        }
    }
    if total == 0 {
        return Err(input("no referring queries in the evaluation split"));
    }
    Ok(correct as f64 / total as f64)
}

// ---------------------------------------------------------------------------
// Retrieval.
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct RetrievalHit {
    pub image_id: u64,
    pub score: f64,
    /// Argmax object's box — localization evidence; absent for images with
    /// no regions and for global-embedding ranking.
    pub best_box: Option<[f32; 4]>,
}

fn rank_hits(mut hits: Vec<RetrievalHit>) -> Vec<RetrievalHit> {
    hits.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.image_id.cmp(&b.image_id))
    });
    hits
}

/// Object-level retrieval: an image's score is the max match score over its
/// objects; the argmax box is returned as localization evidence. Ranked
/// descending, ties by ascending image id.
pub fn local_retrieve(
    params: &EncoderParams<f32>,
    query_words: &[String],
    gallery: &[GalleryEntry],
) -> Result<Vec<RetrievalHit>, EvalError> {
    if gallery.is_empty() {
        return Err(input("empty gallery"));
    }
    let d = params.cfg.d_model;
    let text = local_text_embedding(params, query_words)?;
    let mut hits = Vec::with_capacity(gallery.len());
    for entry in gallery {
        if entry.objects.len() != entry.n() * d || entry.globals.len() != 2 * d {
            return Err(input(format!(
                "gallery image {} does not match embedding width {}",
                entry.id, d
            )));
        }
        let mut best: Option<(usize, f64)> = None;
        for j in 0..entry.n() {
            let s = match_score(params, entry.object(j, d), Some(entry.iou_logits[j]), &text)?
                .score;
            if best.is_none_or(|(_, bs)| s > bs) {
                best = Some((j, s));
            }
        }
        hits.push(match best {
            Some((j, s)) => RetrievalHit {
                image_id: entry.id,
                score: s,
                best_box: Some(entry.boxes[j]),
            },
            None => RetrievalHit {
                image_id: entry.id,
                score: f64::NEG_INFINITY,
                best_box: None,
            },
        });
    }
    Ok(rank_hits(hits))
}

/// Which global row a query ranks against: short captions pair with the
/// coarse row, long captions with the detailed row.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CaptionKind {
    Short,
    Long,
}

/// Global-embedding retrieval: rank gallery images by the calibrated
/// similarity of the query text to each image's selected global row.
pub fn global_retrieve(
    params: &EncoderParams<f32>,
    text_emb: &[f32],
    gallery: &[GalleryEntry],
    kind: CaptionKind,
) -> Result<Vec<RetrievalHit>, EvalError> {
    if gallery.is_empty() {
        return Err(input("empty gallery"));
    }
    let d = params.cfg.d_model;
    let mut hits = Vec::with_capacity(gallery.len());
    for entry in gallery {
        if entry.globals.len() != 2 * d {
            return Err(input(format!(
                "gallery image {} does not match embedding width {}",
                entry.id, d
            )));
        }
        let row = match kind {
            CaptionKind::Short => entry.global_coarse(d),
            CaptionKind::Long => entry.global_detailed(d),
        };
        let score = match_score(params, row, None, text_emb)?.score;
        hits.push(RetrievalHit {
            image_id: entry.id,
            score,
            best_box: None,
        });
    }
    Ok(rank_hits(hits))
}

/// Fraction of queries whose top-k ranking contains at least one positive.
pub fn recall_at_k(
    ranked: &[Vec<u64>],
    positives: &[Vec<u64>],
    k: usize,
) -> Result<f64, EvalError> {
    check_queries(ranked, positives, k)?;
    let hits = ranked
        .iter()
        .zip(positives)
        .filter(|(r, pos)| r.iter().take(k).any(|id| pos.contains(id)))
        .count();
    Ok(hits as f64 / ranked.len() as f64)
}

/// Mean average precision over the top k ranks: per query, precision at
/// each positive hit, summed and divided by `min(|positives|, k)`.
pub fn map_at_k(
    ranked: &[Vec<u64>],
    positives: &[Vec<u64>],
    k: usize,
) -> Result<f64, EvalError> {
    check_queries(ranked, positives, k)?;
    let mut total = 0.0;
    for (r, pos) in ranked.iter().zip(positives) {
        let mut hits = 0usize;
        let mut ap = 0.0;
        for (rank0, id) in r.iter().take(k).enumerate() {
            if pos.contains(id) {
                hits += 1;
                ap += hits as f64 / (rank0 + 1) as f64;
            }
        }
        total += ap / pos.len().min(k) as f64;
    }
    Ok(total / ranked.len() as f64)
}

fn check_queries(ranked: &[Vec<u64>], positives: &[Vec<u64>], k: usize) -> Result<(), EvalError> {
    if ranked.is_empty() {
        return Err(input("no queries"));
    }
    if ranked.len() != positives.len() {
        return Err(input(format!(
            "{} rankings but {} positive sets",
            ranked.len(),
            positives.len()
        )));
    }
    if k == 0 {
        return Err(input("k must be positive"));
    }
    if positives.iter().any(|p| p.is_empty()) {
        return Err(input("every query needs at least one positive"));
    }
    Ok(())
}

/// Spearman rank correlation with tie-averaged ranks.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64, EvalError> {
    if a.len() != b.len() {
        return Err(input(format!("length mismatch: {} vs {}", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(input("need at least two pairs"));
    }
    let ra = tie_ranks(a);
    let rb = tie_ranks(b);
    let n = ra.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for i in 0..ra.len() {
        let da = ra[i] - mean;
        let db = rb[i] - mean;
        cov += da * db;
        va += da * da;
        vb += db * db;
    }
    if va == 0.0 || vb == 0.0 {
        return Err(input("constant input has no rank correlation"));
    }
    Ok(cov / (va.sqrt() * vb.sqrt()))
}

/// 1-based ranks; tied values share the average of their rank range.
fn tie_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&i, &j| x[i].total_cmp(&x[j]).then(i.cmp(&j)));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

// ---------------------------------------------------------------------------
// Reports.
// ---------------------------------------------------------------------------

/// One evaluation's results: a metric map plus the config digest that keys
/// comparison tables.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub metrics: BTreeMap<String, f64>,
    pub config_digest: String,
}

impl EvalReport {
    pub fn new(task: &str, config_digest: &str) -> Self {
        Self {
            task: task.to_string(),
            metrics: BTreeMap::new(),
            config_digest: config_digest.to_string(),
        }
    }

    pub fn set(&mut self, key: &str, value: f64) -> &mut Self {
        self.metrics.insert(key.to_string(), value);
        self
    }

    pub fn to_pretty_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Single flat row: task, digest, then `key=value` pairs in key order.
    pub fn tsv_row(&self) -> String {
        let mut cols = vec![self.task.clone(), self.config_digest.clone()];
        for (k, v) in &self.metrics {
            cols.push(format!("{k}={v:.6}"));
        }
        cols.join("\t")
    }
}
