//! Axis-aligned box arithmetic, feature-grid pooling, and suppression.
//!
//! Boxes are `(x1, y1, x2, y2)` with `x2 > x1`, `y2 > y1`, in continuous
//! feature-grid units. Validity is enforced at construction so the arithmetic
//! ops stay infallible.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("invalid box [{x1}, {y1}, {x2}, {y2}]: corners must be finite with x2 > x1, y2 > y1")]
    InvalidBox { x1: f64, y1: f64, x2: f64, y2: f64 },
    #[error("box [{x1}, {y1}, {x2}, {y2}] does not intersect a {w}x{h} grid")]
    OutsideGrid { x1: f64, y1: f64, x2: f64, y2: f64, w: usize, h: usize },
    #[error("grid data length {len} does not match {w}x{h}x{c}")]
    GridShape { len: usize, w: usize, h: usize, c: usize },
    #[error("grid {w}x{h} is not divisible into {patch}x{patch} patches")]
    PatchShape { w: usize, h: usize, patch: usize },
}

/// Axis-aligned box; corners validated at construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, GeometryError> {
        let finite = x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite();
        if !finite || x2 <= x1 || y2 <= y1 {
            return Err(GeometryError::InvalidBox { x1, y1, x2, y2 });
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = GeometryError;
    fn try_from(v: [f64; 4]) -> Result<Self, Self::Error> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> [f64; 4] {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

/// Intersection-over-union of two boxes, in `[0, 1]`.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    if inter <= 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// Dense M×N IoU matrix: `out[i][j] = iou(a[i], b[j])`.
pub fn pairwise_iou(a: &[BBox], b: &[BBox]) -> Vec<Vec<f64>> {
    a.iter().map(|ai| b.iter().map(|bj| iou(ai, bj)).collect()).collect()
}

/// COCO-convention area bucket for a box (thresholds 32² and 96², in grid units²).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AreaBucket {
    Small,
    Medium,
    Large,
}

pub const AREA_SMALL_MAX: f64 = 32.0 * 32.0;
pub const AREA_MEDIUM_MAX: f64 = 96.0 * 96.0;

pub fn area_bucket(b: &BBox) -> AreaBucket {
    let a = b.area();
    if a < AREA_SMALL_MAX {
        AreaBucket::Small
    } else if a < AREA_MEDIUM_MAX {
        AreaBucket::Medium
    } else {
        AreaBucket::Large
    }
}

/// Dense W×H×C feature field, channel-last: `data[(y*w + x)*c + ch]`.
#[derive(Debug, Clone)]
pub struct FeatureGrid {
    pub w: usize,
    pub h: usize,
    pub c: usize,
    pub data: Vec<f32>,
}

impl FeatureGrid {
    pub fn new(w: usize, h: usize, c: usize, data: Vec<f32>) -> Result<Self, GeometryError> {
        if data.len() != w * h * c {
            return Err(GeometryError::GridShape { len: data.len(), w, h, c });
        }
        Ok(Self { w, h, c, data })
    }

    pub fn zeros(w: usize, h: usize, c: usize) -> Self {
        Self { w, h, c, data: vec![0.0; w * h * c] }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> &[f32] {
        let base = (y * self.w + x) * self.c;
        &self.data[base..base + self.c]
    }

    #[inline]
    pub fn at_mut(&mut self, x: usize, y: usize) -> &mut [f32] {
        let base = (y * self.w + x) * self.c;
        &mut self.data[base..base + self.c]
    }

    /// Bilinear sample of all channels at a continuous point. Cell (x, y)
    /// holds its value at center (x + 0.5, y + 0.5); coordinates are clamped
    /// at the border (out-of-range queries repeat the edge cell).
    pub fn sample(&self, px: f64, py: f64, out: &mut [f32]) {
        debug_assert_eq!(out.len(), self.c);
        let gx = px - 0.5;
        let gy = py - 0.5;
        let x0f = gx.floor();
        let y0f = gy.floor();
        let fx = gx - x0f;
        let fy = gy - y0f;
        let clamp = |v: f64, hi: usize| -> usize { (v.max(0.0) as usize).min(hi - 1) };
        let x0 = clamp(x0f, self.w);
        let x1 = clamp(x0f + 1.0, self.w);
        let y0 = clamp(y0f, self.h);
        let y1 = clamp(y0f + 1.0, self.h);
        let (w00, w01) = ((1.0 - fx) * (1.0 - fy), fx * (1.0 - fy));
        let (w10, w11) = ((1.0 - fx) * fy, fx * fy);
        let (c00, c01) = (self.at(x0, y0), self.at(x1, y0));
        let (c10, c11) = (self.at(x0, y1), self.at(x1, y1));
        for ch in 0..self.c {
            let v = w00 * c00[ch] as f64
                + w01 * c01[ch] as f64
                + w10 * c10[ch] as f64
                + w11 * c11[ch] as f64;
            out[ch] = v as f32;
        }
    }
}

/// Simplified RoI pooling: the box is clipped to the grid and divided into
/// `s`×`s` bins; each bin contributes one bilinear sample at its center.
/// Output is bin-row-major with channels innermost (`s·s·c` values).
pub fn roi_pool(grid: &FeatureGrid, b: &BBox, s: usize) -> Result<Vec<f32>, GeometryError> {
    assert!(s > 0, "bin count must be positive");
    let x1 = b.x1.max(0.0);
    let y1 = b.y1.max(0.0);
    let x2 = b.x2.min(grid.w as f64);
    let y2 = b.y2.min(grid.h as f64);
    if x2 <= x1 || y2 <= y1 {
        return Err(GeometryError::OutsideGrid {
            x1: b.x1,
            y1: b.y1,
            x2: b.x2,
            y2: b.y2,
            w: grid.w,
            h: grid.h,
        });
    }
    let bw = (x2 - x1) / s as f64;
    let bh = (y2 - y1) / s as f64;
    let mut out = vec![0.0f32; s * s * grid.c];
    for i in 0..s {
        let py = y1 + (i as f64 + 0.5) * bh;
        for j in 0..s {
            let px = x1 + (j as f64 + 0.5) * bw;
            let base = (i * s + j) * grid.c;
            grid.sample(px, py, &mut out[base..base + grid.c]);
        }
    }
    Ok(out)
}

/// Non-overlapping patch vectors, patches in row-major order over the grid,
/// each flattened cell-row-major with channels innermost (`patch²·c` values).
pub fn patches(grid: &FeatureGrid, patch: usize) -> Result<Vec<Vec<f32>>, GeometryError> {
    if patch == 0 || grid.w % patch != 0 || grid.h % patch != 0 {
        return Err(GeometryError::PatchShape { w: grid.w, h: grid.h, patch });
    }
    let (pw, ph) = (grid.w / patch, grid.h / patch);
    let mut out = Vec::with_capacity(pw * ph);
    for py in 0..ph {
        for px in 0..pw {
            let mut v = Vec::with_capacity(patch * patch * grid.c);
            for dy in 0..patch {
                for dx in 0..patch {
                    v.extend_from_slice(grid.at(px * patch + dx, py * patch + dy));
                }
            }
            out.push(v);
        }
    }
    Ok(out)
}

/// Greedy non-maximum suppression. Candidates are visited in descending
/// score order (ties broken by ascending index); a candidate is dropped when
/// its IoU with any already-kept box exceeds `thr`. Returns kept indices in
/// visit order.
pub fn nms(boxes: &[BBox], scores: &[f64], thr: f64) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len(), "one score per box");
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut keep: Vec<usize> = Vec::new();
    for &cand in &order {
        if keep.iter().all(|&k| iou(&boxes[k], &boxes[cand]) <= thr) {
            keep.push(cand);
        }
    }
    keep
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn iou_overlapping_halves() {
        // 10x10 boxes offset by half: inter 50, union 150.
        let a = bx(0.0, 0.0, 10.0, 10.0);
        let b = bx(5.0, 0.0, 15.0, 10.0);
        let v = iou(&a, &b);
        assert!((v - 1.0 / 3.0).abs() < 1e-12, "got {v}");
    }

    #[test]
    fn iou_disjoint_is_zero_and_identical_is_one() {
        let a = bx(0.0, 0.0, 1.0, 1.0);
        let b = bx(5.0, 5.0, 6.0, 6.0);
        assert_eq!(iou(&a, &b), 0.0);
        assert_eq!(iou(&a, &a), 1.0);
        // Shared edge only: zero-width intersection.
        let c = bx(1.0, 0.0, 2.0, 1.0);
        assert_eq!(iou(&a, &c), 0.0);
    }

    #[test]
    fn degenerate_boxes_are_rejected() {
        assert!(BBox::new(0.0, 0.0, 0.0, 10.0).is_err());
        assert!(BBox::new(5.0, 0.0, 4.0, 10.0).is_err());
        assert!(BBox::new(0.0, 0.0, f64::NAN, 1.0).is_err());
        assert!(BBox::new(0.0, 0.0, f64::INFINITY, 1.0).is_err());
    }

    #[test]
    fn bbox_serde_roundtrip_and_validation() {
        let b = bx(1.0, 2.0, 3.5, 4.5);
        let s = serde_json::to_string(&b).unwrap();
        assert_eq!(s, "[1.0,2.0,3.5,4.5]");
        let back: BBox = serde_json::from_str(&s).unwrap();
        assert_eq!(back, b);
        assert!(serde_json::from_str::<BBox>("[0.0,0.0,0.0,1.0]").is_err());
    }

    #[test]
    fn pairwise_matches_scalar() {
        let a = vec![bx(0.0, 0.0, 10.0, 10.0), bx(2.0, 2.0, 4.0, 4.0)];
        let b = vec![bx(5.0, 0.0, 15.0, 10.0), bx(0.0, 0.0, 10.0, 10.0), bx(20.0, 20.0, 21.0, 21.0)];
        let m = pairwise_iou(&a, &b);
        assert_eq!(m.len(), 2);
        assert_eq!(m[0].len(), 3);
        for (i, ai) in a.iter().enumerate() {
            for (j, bj) in b.iter().enumerate() {
                assert_eq!(m[i][j], iou(ai, bj));
            }
        }
    }

    #[test]
    fn area_buckets_follow_coco_thresholds() {
        assert_eq!(area_bucket(&bx(0.0, 0.0, 10.0, 10.0)), AreaBucket::Small);
        assert_eq!(area_bucket(&bx(0.0, 0.0, 50.0, 50.0)), AreaBucket::Medium);
        assert_eq!(area_bucket(&bx(0.0, 0.0, 100.0, 100.0)), AreaBucket::Large);
        // Boundaries: exactly 32² is medium, exactly 96² is large.
        assert_eq!(area_bucket(&bx(0.0, 0.0, 32.0, 32.0)), AreaBucket::Medium);
        assert_eq!(area_bucket(&bx(0.0, 0.0, 96.0, 96.0)), AreaBucket::Large);
    }

    #[test]
    fn roi_pool_constant_field_is_constant() {
        let mut g = FeatureGrid::zeros(16, 16, 3);
        for v in g.data.iter_mut() {
            *v = 2.5;
        }
        let out = roi_pool(&g, &bx(1.3, 2.7, 9.1, 14.0), 4).unwrap();
        assert_eq!(out.len(), 4 * 4 * 3);
        for v in out {
            assert!((v - 2.5).abs() < 1e-6);
        }
    }

    #[test]
    fn roi_pool_bilinear_hand_case() {
        // 2x2 single-channel grid [[1,2],[3,4]]; box centered between all
        // four cell centers with a single bin samples their mean.
        let g = FeatureGrid::new(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = roi_pool(&g, &bx(0.5, 0.5, 1.5, 1.5), 1).unwrap();
        assert_eq!(out.len(), 1);
        assert!((out[0] - 2.5).abs() < 1e-6, "got {}", out[0]);
        // Bin center on an exact cell center reads that cell.
        let out = roi_pool(&g, &bx(0.0, 0.0, 1.0, 1.0), 1).unwrap();
        assert!((out[0] - 1.0).abs() < 1e-6, "got {}", out[0]);
    }

    #[test]
    fn roi_pool_clips_and_rejects_outside() {
        let g = FeatureGrid::zeros(8, 8, 2);
        // Straddles the border: clipped, still pools.
        let out = roi_pool(&g, &bx(-3.0, -3.0, 4.0, 4.0), 2).unwrap();
        assert_eq!(out.len(), 2 * 2 * 2);
        // Entirely outside: clip leaves nothing.
        let b = bx(10.0, 10.0, 12.0, 12.0);
        assert!(matches!(roi_pool(&g, &b, 2), Err(GeometryError::OutsideGrid { .. })));
    }

    #[test]
    fn roi_pool_output_ordering_is_bin_major() {
        // Left half 1.0, right half 5.0 on one channel: first bin column
        // samples left values, last bin column right values.
        let mut g = FeatureGrid::zeros(8, 8, 1);
        for y in 0..8 {
            for x in 0..8 {
                g.at_mut(x, y)[0] = if x < 4 { 1.0 } else { 5.0 };
            }
        }
        let out = roi_pool(&g, &bx(0.0, 0.0, 8.0, 8.0), 4).unwrap();
        assert!((out[0] - 1.0).abs() < 1e-6);
        assert!((out[3] - 5.0).abs() < 1e-6);
    }

    #[test]
    fn patches_shapes_and_order() {
        let mut g = FeatureGrid::zeros(4, 4, 2);
        for y in 0..4 {
            for x in 0..4 {
                g.at_mut(x, y)[0] = (y * 4 + x) as f32;
                g.at_mut(x, y)[1] = 100.0 + (y * 4 + x) as f32;
            }
        }
        let p = patches(&g, 2).unwrap();
        assert_eq!(p.len(), 4);
        assert_eq!(p[0].len(), 2 * 2 * 2);
        // First patch covers cells (0,0),(1,0),(0,1),(1,1) in that order.
        assert_eq!(p[0][0], 0.0);
        assert_eq!(p[0][2], 1.0);
        assert_eq!(p[0][4], 4.0);
        // Second patch starts at cell (2,0).
        assert_eq!(p[1][0], 2.0);
        assert!(patches(&g, 3).is_err());
    }

    #[test]
    fn nms_suppresses_above_threshold() {
        // IoU of these two is 0.6 > 0.5: lower-scored one goes.
        let boxes = vec![bx(0.0, 0.0, 10.0, 10.0), bx(0.0, 2.5, 10.0, 12.5)];
        let keep = nms(&boxes, &[0.9, 0.8], 0.5);
        assert_eq!(keep, vec![0]);
        // At threshold 0.6 the pair survives (suppression is strict >).
        let keep = nms(&boxes, &[0.9, 0.8], 0.6);
        assert_eq!(keep, vec![0, 1]);
    }

    #[test]
    fn nms_ties_break_by_index_and_empty_ok() {
        let boxes = vec![bx(0.0, 0.0, 10.0, 10.0), bx(1.0, 0.0, 11.0, 10.0)];
        // Equal scores: index 0 visited first, suppresses index 1 (IoU 9/11).
        let keep = nms(&boxes, &[0.5, 0.5], 0.5);
        assert_eq!(keep, vec![0]);
        assert!(nms(&[], &[], 0.5).is_empty());
    }
}
