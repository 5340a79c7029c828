//! Deterministic synthetic benchmark: scenes of attributed shapes on a
//! feature grid, with controllable-quality box proposals, referring
//! descriptions, and short/long captions.
//!
//! Feature grids encode object attributes directly (each attribute word owns
//! a fixed unit code in channel space; an object's cells carry the sum of its
//! four attribute codes plus Gaussian noise), so a small encoder can solve
//! the benchmark and measurements exercise the embedding mechanism rather
//! than vision capacity.

use crate::geometry::{iou, BBox, FeatureGrid};
use crate::layout::{COLORS, SHAPES, SIZES, TEXTURES};
use crate::seeding::{hash_word, mix, splitmix64};
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Codebook seed is a fixed constant: the attribute encoding is part of the
/// benchmark definition itself, not of any particular dataset seed.
const CODEBOOK_SEED: u64 = 0xC0DE_B00C;
const TAG_PLACE: u64 = 0x51;
const TAG_PROPOSALS: u64 = 0x52;
const TAG_NOISE: u64 = 0x53;

/// Side-length bands, in grid cells.
const SMALL_SIDE: (u64, u64) = (7, 14);
const LARGE_SIDE: (u64, u64) = (24, 40);
/// Ground-truth boxes of one scene may overlap at most this much.
const MAX_GT_IOU: f64 = 0.3;
/// Fraction of non-mix proposal slots holding uniform background boxes (the
/// rest are band-jittered copies of ground-truth boxes).
const BACKGROUND_SHARE: f64 = 0.25;

#[derive(Debug, Error)]
pub enum SceneGenError {
    #[error("invalid generation config: {0}")]
    Config(String),
    #[error("scene constraints unsatisfiable (scene {0})")]
    Unsatisfiable(u64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub shape: String,
    pub color: String,
    pub size: String,
    pub texture: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub id: u64,
    pub w: u32,
    pub h: u32,
    /// Annotated objects in reading order (top-to-bottom, then
    /// left-to-right) — the canonical storage order.
    pub objects: Vec<ObjectSpec>,
    pub short: Vec<String>,
    pub long: Vec<String>,
    pub proposals: Vec<BBox>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub seed: u64,
    pub scenes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Proposals per scene.
    pub proposals: usize,
    /// Target overlap bands for jittered proposals.
    pub jitter_bands: Vec<f64>,
    /// Accepted deviation around each band.
    pub band_tolerance: f64,
    /// Fraction of proposal slots replaced by exact ground-truth boxes.
    pub gt_mix_fraction: f64,
    pub grid_w: usize,
    pub grid_h: usize,
    pub grid_c: usize,
    pub noise_sigma: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            seed: 17,
            scenes: 2000,
            min_objects: 1,
            max_objects: 6,
            proposals: 100,
            jitter_bands: vec![0.9, 0.7, 0.55, 0.3],
            band_tolerance: 0.05,
            gt_mix_fraction: 0.0,
            grid_w: 64,
            grid_h: 64,
            grid_c: 8,
            noise_sigma: 0.1,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), SceneGenError> {
        let err = |m: String| Err(SceneGenError::Config(m));
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return err(format!(
                "objects-per-scene range {}..{} is invalid",
                self.min_objects, self.max_objects
            ));
        }
        if self.proposals < self.max_objects {
            return err(format!(
                "{} proposals cannot cover up to {} objects",
                self.proposals, self.max_objects
            ));
        }
        if self.jitter_bands.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return err("jitter bands must lie in (0, 1)".into());
        }
        if !(self.band_tolerance > 0.0) {
            return err("band tolerance must be positive".into());
        }
        if let Some(anchor) = self.jitter_bands.first() {
            // The first band anchors trainability: every object's first-cycle
            // jitter must stay a positive match (IoU > 0.5) even at the low
            // edge of the tolerance window.
            if !(anchor - self.band_tolerance > 0.5) {
                return err(format!(
                    "first jitter band {anchor} - tolerance {} must exceed 0.5",
                    self.band_tolerance
                ));
            }
            if self.jittered_proposals() < self.max_objects {
                return err(format!(
                    "{} jittered proposal slots cannot anchor {} objects",
                    self.jittered_proposals(),
                    self.max_objects
                ));
            }
        }
        if !(0.0..=1.0).contains(&self.gt_mix_fraction) {
            return err("gt_mix_fraction must lie in [0, 1]".into());
        }
        if self.grid_w == 0 || self.grid_h == 0 || self.grid_c == 0 {
            return err("grid dimensions must be nonzero".into());
        }
        if !(self.noise_sigma >= 0.0) {
            return err("noise sigma must be nonnegative".into());
        }
        Ok(())
    }

    /// Proposal slots filled with band-jittered ground-truth copies (the
    /// rest hold uniform background boxes).
    pub fn jittered_proposals(&self) -> usize {
        let n_background = ((self.proposals as f64) * BACKGROUND_SHARE).round() as usize;
        self.proposals - n_background
    }
}

/// Unit code vector for one attribute word, fixed for all datasets.
pub fn attribute_code(word: &str, c: usize) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(CODEBOOK_SEED ^ hash_word(word)));
    let raw: Vec<f64> = (0..c).map(|_| rng.sample(StandardNormal)).collect();
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    raw.iter().map(|v| (v / norm) as f32).collect()
}

/// Sum of the object's four attribute codes.
pub fn object_code(obj: &ObjectSpec, c: usize) -> Vec<f32> {
    let mut code = vec![0.0f32; c];
    for word in [&obj.shape, &obj.color, &obj.size, &obj.texture] {
        for (acc, v) in code.iter_mut().zip(attribute_code(word, c)) {
            *acc += v;
        }
    }
    code
}

/// Coarse location of a box on the grid: `["center"]` when its center lies
/// in the middle third of both axes, otherwise a vertical + horizontal word
/// pair such as `["top", "left"]`.
pub fn coarse_location(b: &BBox, w: f64, h: f64) -> Vec<&'static str> {
    let (cx, cy) = b.center();
    let nx = cx / w - 0.5;
    let ny = cy / h - 0.5;
    let third = 1.0 / 6.0;
    if nx.abs() <= third && ny.abs() <= third {
        return vec!["center"];
    }
    let vertical = if ny < 0.0 { "top" } else { "bottom" };
    let horizontal = if nx < 0.0 { "left" } else { "right" };
    vec![vertical, horizontal]
}

fn reading_order_key(o: &ObjectSpec) -> (i64, i64) {
    ((o.bbox.y1 * 16.0) as i64, (o.bbox.x1 * 16.0) as i64)
}

fn place_objects(rng: &mut ChaCha8Rng, cfg: &GenConfig) -> Option<Vec<ObjectSpec>> {
    let n = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let mut objects: Vec<ObjectSpec> = Vec::with_capacity(n);
    let mut used_tuples: Vec<(usize, usize, usize, usize)> = Vec::new();
    for _ in 0..n {
        let mut placed = false;
        'attempts: for _ in 0..500 {
            let tuple = (
                rng.random_range(0..SHAPES.len()),
                rng.random_range(0..COLORS.len()),
                rng.random_range(0..SIZES.len()),
                rng.random_range(0..TEXTURES.len()),
            );
            if used_tuples.contains(&tuple) {
                continue;
            }
            let (lo, hi) = if tuple.2 == 0 { SMALL_SIDE } else { LARGE_SIDE };
            let bw = rng.random_range(lo..=hi);
            let bh = rng.random_range(lo..=hi);
            if bw >= cfg.grid_w as u64 || bh >= cfg.grid_h as u64 {
                continue;
            }
            let x1 = rng.random_range(0..=(cfg.grid_w as u64 - bw)) as f64;
            let y1 = rng.random_range(0..=(cfg.grid_h as u64 - bh)) as f64;
            let bbox = BBox::new(x1, y1, x1 + bw as f64, y1 + bh as f64).ok()?;
            for other in &objects {
                if iou(&bbox, &other.bbox) >= MAX_GT_IOU {
                    continue 'attempts;
                }
            }
            used_tuples.push(tuple);
            objects.push(ObjectSpec {
                bbox,
                shape: SHAPES[tuple.0].to_string(),
                color: COLORS[tuple.1].to_string(),
                size: SIZES[tuple.2].to_string(),
                texture: TEXTURES[tuple.3].to_string(),
            });
            placed = true;
            break;
        }
        if !placed {
            return None;
        }
    }
    objects.sort_by_key(reading_order_key);
    Some(objects)
}

/// Short and long captions for a set of objects (canonical reading order).
pub fn captions(objects: &[ObjectSpec], w: f64, h: f64) -> (Vec<String>, Vec<String>) {
    let mut short: Vec<String> = objects.iter().map(|o| o.shape.clone()).collect();
    short.sort();
    let mut long = Vec::new();
    for o in objects {
        long.push(o.color.clone());
        long.push(o.size.clone());
        long.push(o.texture.clone());
        long.push(o.shape.clone());
        for word in coarse_location(&o.bbox, w, h) {
            long.push(word.to_string());
        }
    }
    (short, long)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DescribeKind {
    /// Class-level description: the shape name only.
    Class,
    /// Minimal uniquely-referring description.
    Referring,
}

fn matches_description(obj: &ObjectSpec, desc: &[String], w: f64, h: f64) -> bool {
    let loc = coarse_location(&obj.bbox, w, h);
    desc.iter().all(|word| {
        obj.shape == *word
            || obj.color == *word
            || obj.size == *word
            || obj.texture == *word
            || loc.iter().any(|l| l == word)
    })
}

/// Describe one object. `Class` yields `[shape]`; `Referring` yields the
/// shortest prefix of (color, size, texture, coarse location) that — with
/// the shape appended — matches exactly one object in the scene.
pub fn describe_object(scene: &Scene, index: usize, kind: DescribeKind) -> Vec<String> {
    let obj = &scene.objects[index];
    if kind == DescribeKind::Class {
        return vec![obj.shape.clone()];
    }
    let w = scene.w as f64;
    let h = scene.h as f64;
    let loc: Vec<String> = coarse_location(&obj.bbox, w, h)
        .iter()
        .map(|s| s.to_string())
        .collect();
    let prefix_pool: Vec<Vec<String>> = vec![
        vec![obj.color.clone()],
        vec![obj.size.clone()],
        vec![obj.texture.clone()],
        loc,
    ];
    let mut desc: Vec<String> = Vec::new();
    for upto in 0..=prefix_pool.len() {
        desc = prefix_pool[..upto].concat();
        desc.push(obj.shape.clone());
        let hits = scene
            .objects
            .iter()
            .filter(|o| matches_description(o, &desc, w, h))
            .count();
        if hits == 1 {
            return desc;
        }
    }
    // Unreachable while the per-scene attribute-tuple uniqueness invariant
    // holds; the full description is still a valid (if not minimal) referent.
    desc
}

/// Jitter `b` until its overlap with the original lies inside
/// `band ± tolerance`, clamped to the grid.
fn jitter_to_band(
    rng: &mut ChaCha8Rng,
    b: &BBox,
    band: f64,
    tolerance: f64,
    w: f64,
    h: f64,
) -> BBox {
    let mx = (b.width() * (1.0 - band)).max(0.25) * 1.5;
    let my = (b.height() * (1.0 - band)).max(0.25) * 1.5;
    for _ in 0..100_000 {
        let x1 = (b.x1 + rng.random_range(-mx..=mx)).clamp(0.0, w - 0.5);
        let x2 = (b.x2 + rng.random_range(-mx..=mx)).clamp(x1 + 0.25, w);
        let y1 = (b.y1 + rng.random_range(-my..=my)).clamp(0.0, h - 0.5);
        let y2 = (b.y2 + rng.random_range(-my..=my)).clamp(y1 + 0.25, h);
        let candidate = match BBox::new(x1, y1, x2, y2) {
            Ok(c) => c,
            Err(_) => continue,
        };
        let v = iou(b, &candidate);
        if (v - band).abs() <= tolerance {
            return candidate;
        }
    }
    unreachable!("jitter rejection failed to hit band {band} after 100k draws")
}

fn random_background_box(rng: &mut ChaCha8Rng, w: f64, h: f64) -> BBox {
    loop {
        let bw = rng.random_range(4.0..=w.min(40.0));
        let bh = rng.random_range(4.0..=h.min(40.0));
        let x1 = rng.random_range(0.0..=(w - bw));
        let y1 = rng.random_range(0.0..=(h - bh));
        if let Ok(b) = BBox::new(x1, y1, x1 + bw, y1 + bh) {
            return b;
        }
    }
}

/// Sample the scene's proposal set.
///
/// Slot layout before ground-truth mixing: jittered boxes first (cycling
/// objects fastest, then bands, so the first `#objects` slots cover every
/// object at the first band), then uniform background boxes filling the
/// remaining quarter. When `gt_mix_fraction > 0`, that fraction of slots
/// (at least one per object) is replaced by exact ground-truth boxes.
pub fn sample_proposals(scene: &Scene, cfg: &GenConfig) -> Vec<BBox> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, TAG_PROPOSALS, scene.id));
    let n = cfg.proposals;
    let w = scene.w as f64;
    let h = scene.h as f64;
    let n_obj = scene.objects.len();
    let mut out: Vec<BBox> = Vec::with_capacity(n);
    if n_obj > 0 && !cfg.jitter_bands.is_empty() {
        for slot in 0..cfg.jittered_proposals() {
            let gt = &scene.objects[slot % n_obj].bbox;
            let band = cfg.jitter_bands[(slot / n_obj) % cfg.jitter_bands.len()];
            out.push(jitter_to_band(&mut rng, gt, band, cfg.band_tolerance, w, h));
        }
    }
    while out.len() < n {
        out.push(random_background_box(&mut rng, w, h));
    }
    if n_obj > 0 && cfg.gt_mix_fraction > 0.0 {
        let k = ((n as f64) * cfg.gt_mix_fraction).round() as usize;
        let k = k.clamp(n_obj.min(n), n);
        let slots = sample_indices(&mut rng, n, k);
        for (i, slot) in slots.iter().enumerate() {
            out[slot] = scene.objects[i % n_obj].bbox;
        }
    }
    out
}

/// Attribute-coded feature grid for a scene: per-cell Gaussian noise
/// (seeded by scene id alone, so grids are reconstructible without the
/// generation seed) everywhere, plus the object code on cells covered by
/// each object's box, later objects painting over earlier ones.
pub fn render_features(scene: &Scene, c: usize, sigma: f64) -> FeatureGrid {
    let w = scene.w as usize;
    let h = scene.h as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(mix(scene.id, TAG_NOISE, 0));
    let noise: Vec<f32> = (0..w * h * c)
        .map(|_| {
            let v: f64 = rng.sample(StandardNormal);
            (v * sigma) as f32
        })
        .collect();
    let mut grid = FeatureGrid::new(w, h, c, noise.clone()).expect("valid grid dims");
    for obj in &scene.objects {
        let code = object_code(obj, c);
        let x_lo = obj.bbox.x1.max(0.0) as usize;
        let x_hi = (obj.bbox.x2.min(w as f64)).ceil() as usize;
        let y_lo = obj.bbox.y1.max(0.0) as usize;
        let y_hi = (obj.bbox.y2.min(h as f64)).ceil() as usize;
        for y in y_lo..y_hi {
            for x in x_lo..x_hi {
                let cx = x as f64 + 0.5;
                let cy = y as f64 + 0.5;
                if cx > obj.bbox.x1 && cx < obj.bbox.x2 && cy > obj.bbox.y1 && cy < obj.bbox.y2 {
                    let cell = grid.at_mut(x, y);
                    let base = (y * w + x) * c;
                    for ch in 0..c {
                        cell[ch] = code[ch] + noise[base + ch];
                    }
                }
            }
        }
    }
    grid
}

/// Generate the full dataset for a config. Pure function of the config.
pub fn generate_dataset(cfg: &GenConfig) -> Result<Vec<Scene>, SceneGenError> {
    cfg.validate()?;
    let mut scenes = Vec::with_capacity(cfg.scenes);
    for id in 0..cfg.scenes as u64 {
        let mut objects = None;
        for attempt in 0..50u64 {
            let mut rng =
                ChaCha8Rng::seed_from_u64(mix(cfg.seed, TAG_PLACE, id.wrapping_add(attempt << 40)));
            if let Some(objs) = place_objects(&mut rng, cfg) {
                objects = Some(objs);
                break;
            }
        }
        let objects = objects.ok_or(SceneGenError::Unsatisfiable(id))?;
        let (short, long) = captions(&objects, cfg.grid_w as f64, cfg.grid_h as f64);
        let mut scene = Scene {
            id,
            w: cfg.grid_w as u32,
            h: cfg.grid_h as u32,
            objects,
            short,
            long,
            proposals: Vec::new(),
        };
        scene.proposals = sample_proposals(&scene, cfg);
        if !cfg.jitter_bands.is_empty() {
            // Guaranteed by construction: the first jitter cycle hands every
            // object a proposal at the anchor band, which validation pins
            // above the positive threshold. Checked anyway — an uncovered
            // object would be silently untrainable.
            assert!(
                proposals_cover_objects(&scene),
                "scene {id}: an object has no proposal with IoU > 0.5"
            );
        }
        scenes.push(scene);
    }
    Ok(scenes)
}

/// Every ground-truth box must have at least one proposal overlapping it
/// above the training-positive threshold, otherwise the object would be
/// untrainable.
pub fn proposals_cover_objects(scene: &Scene) -> bool {
    scene.objects.iter().all(|o| {
        scene
            .proposals
            .iter()
            .any(|p| iou(p, &o.bbox) > 0.5)
    })
}
