//! Boxes, IoU, anchors, grid specs, coordinate features and mask
//! rasterization.
//!
//! Cells are indexed row-major. Prediction slots are flattened
//! resolution-major, then row-major cell, then anchor within the cell.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Axis-aligned box in pixels: left/top corner plus width/height.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub const fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - w / 2.0, cy - h / 2.0, w, h)
    }

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self::new(x0, y0, (x1 - x0).max(0.0), (y1 - y0).max(0.0))
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn has_positive_area(&self) -> bool {
        self.w > 0.0 && self.h > 0.0
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.w.is_finite() && self.h.is_finite()
    }

    /// Intersection with `[0, width] × [0, height]`.
    pub fn clip(&self, width: f64, height: f64) -> Self {
        let x0 = self.x.clamp(0.0, width);
        let y0 = self.y.clamp(0.0, height);
        let x1 = self.right().clamp(0.0, width);
        let y1 = self.bottom().clamp(0.0, height);
        Self::from_corners(x0, y0, x1.max(x0), y1.max(y0))
    }

    pub fn within(&self, width: f64, height: f64) -> bool {
        self.x >= 0.0 && self.y >= 0.0 && self.right() <= width && self.bottom() <= height
    }
}

/// Intersection over union; zero when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.right().min(b.right()) - a.x.max(b.x)).max(0.0);
    let ih = (a.bottom().min(b.bottom()) - a.y.max(b.y)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Width/height prior replicated at every cell of one resolution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnchorBox {
    pub pw: f64,
    pub ph: f64,
}

impl AnchorBox {
    pub const fn new(pw: f64, ph: f64) -> Self {
        Self { pw, ph }
    }
}

/// The nine anchor priors, smallest first.
pub const ANCHORS: [AnchorBox; 9] = [
    AnchorBox::new(10.0, 13.0),
    AnchorBox::new(16.0, 30.0),
    AnchorBox::new(33.0, 23.0),
    AnchorBox::new(30.0, 61.0),
    AnchorBox::new(62.0, 45.0),
    AnchorBox::new(59.0, 119.0),
    AnchorBox::new(116.0, 90.0),
    AnchorBox::new(156.0, 198.0),
    AnchorBox::new(373.0, 326.0),
];

pub const ANCHORS_PER_CELL: usize = 3;
pub const NUM_RESOLUTIONS: usize = 3;
/// Strides of resolutions `k = 0, 1, 2`.
pub const STRIDES: [usize; NUM_RESOLUTIONS] = [32, 16, 8];

/// Anchors used at resolution `k`: the coarsest grid gets the largest priors.
pub fn anchors_for(k: usize) -> [AnchorBox; ANCHORS_PER_CELL] {
    let start = (NUM_RESOLUTIONS - 1 - k) * ANCHORS_PER_CELL;
    [ANCHORS[start], ANCHORS[start + 1], ANCHORS[start + 2]]
}

/// Spatial layout of one feature grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub rows: usize,
    pub cols: usize,
    pub stride: usize,
    pub k: usize,
}

impl GridSpec {
    /// The three grids for a square input of `size` pixels.
    pub fn pyramid(size: usize) -> Result<[GridSpec; NUM_RESOLUTIONS]> {
        if size == 0 || !size.is_multiple_of(STRIDES[0]) {
            return Err(Error::Shape(format!(
                "input size {size} must be a positive multiple of {}",
                STRIDES[0]
            )));
        }
        Ok(std::array::from_fn(|k| {
            let n = size / STRIDES[k];
            GridSpec {
                rows: n,
                cols: n,
                stride: STRIDES[k],
                k,
            }
        }))
    }

    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }

    pub fn width_px(&self) -> f64 {
        (self.cols * self.stride) as f64
    }

    pub fn height_px(&self) -> f64 {
        (self.rows * self.stride) as f64
    }

    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            (col as f64 + 0.5) * self.stride as f64,
            (row as f64 + 0.5) * self.stride as f64,
        )
    }
}

/// Total number of anchor placements `m` over a pyramid.
pub fn num_predictions(specs: &[GridSpec]) -> usize {
    specs.iter().map(|s| s.cells() * ANCHORS_PER_CELL).sum()
}

/// Location of one prediction slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlotIndex {
    pub k: usize,
    pub row: usize,
    pub col: usize,
    pub anchor: usize,
}

pub fn flat_index(specs: &[GridSpec], slot: SlotIndex) -> usize {
    let offset: usize = specs[..slot.k].iter().map(|s| s.cells() * ANCHORS_PER_CELL).sum();
    let spec = &specs[slot.k];
    offset + (slot.row * spec.cols + slot.col) * ANCHORS_PER_CELL + slot.anchor
}

pub fn unflatten(specs: &[GridSpec], mut index: usize) -> Result<SlotIndex> {
    let m = num_predictions(specs);
    for spec in specs {
        let n = spec.cells() * ANCHORS_PER_CELL;
        if index < n {
            let cell = index / ANCHORS_PER_CELL;
            return Ok(SlotIndex {
                k: spec.k,
                row: cell / spec.cols,
                col: cell % spec.cols,
                anchor: index % ANCHORS_PER_CELL,
            });
        }
        index -= n;
    }
    Err(Error::IndexOutOfRange { index: index + m, len: m })
}

/// Box of anchor `anchor` centered on cell `(row, col)`.
pub fn anchor_placement(anchor: AnchorBox, row: usize, col: usize, spec: &GridSpec) -> BBox {
    let (cx, cy) = spec.cell_center(row, col);
    BBox::from_center(cx, cy, anchor.pw, anchor.ph)
}

/// Location features appended to every cell: an `(H·W) × 8` matrix whose
/// row for column `i`, row `j` is
/// `(i/W, j/H, (i+½)/W, (j+½)/H, (i+1)/W, (j+1)/H, 1/W, 1/H)`.
pub fn spatial_coord_features(spec: &GridSpec) -> Tensor {
    let (w, h) = (spec.cols as f64, spec.rows as f64);
    let mut data = Vec::with_capacity(spec.cells() * 8);
    for j in 0..spec.rows {
        for i in 0..spec.cols {
            let (i, j) = (i as f64, j as f64);
            data.extend_from_slice(&[
                i / w,
                j / h,
                (i + 0.5) / w,
                (j + 0.5) / h,
                (i + 1.0) / w,
                (j + 1.0) / h,
                1.0 / w,
                1.0 / h,
            ]);
        }
    }
    Tensor::new(&[spec.cells(), 8], data)
}

/// Ground-truth attention mask for one grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub rows: usize,
    pub cols: usize,
    /// Row-major, each entry 0 or 1.
    pub values: Vec<u8>,
}

impl BinaryMask {
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.values[row * self.cols + col]
    }

    pub fn count_ones(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1).count()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }
}

/// A cell is inside the mask iff its center lies strictly inside `gt`.
pub fn rasterize_mask(gt: &BBox, spec: &GridSpec) -> BinaryMask {
    let mut values = vec![0u8; spec.cells()];
    if gt.has_positive_area() {
        for r in 0..spec.rows {
            let (_, cy) = spec.cell_center(r, 0);
            if !(gt.y < cy && cy < gt.bottom()) {
                continue;
            }
            for c in 0..spec.cols {
                let (cx, _) = spec.cell_center(r, c);
                if gt.x < cx && cx < gt.right() {
                    values[r * spec.cols + c] = 1;
                }
            }
        }
    }
    BinaryMask {
        rows: spec.rows,
        cols: spec.cols,
        values,
    }
}

/// Overlap length of `[c - half, c + half]` with `[lo, hi]`, for every cell
/// center along one axis, computed the same way [`iou`] does.
fn axis_overlaps(n: usize, stride: usize, extent: f64, lo: f64, hi: f64) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let c = (i as f64 + 0.5) * stride as f64;
            let start = c - extent / 2.0;
            let end = start + extent;
            (end.min(hi) - start.max(lo)).max(0.0)
        })
        .collect()
}

fn near_max(v: &[f64], scale: f64) -> Vec<usize> {
    let max = v.iter().cloned().fold(0.0, f64::max);
    let tol = 1e-9 * scale.max(1.0);
    (0..v.len()).filter(|&i| v[i] >= max - tol).collect()
}

/// Flat index of the anchor placement with the highest IoU against `gt`;
/// ties go to the lowest index.
///
/// IoU of a fixed-size placement factors into per-axis overlaps that only
/// shrink as the center moves away, so only the rows and columns whose
/// overlap is (numerically) maximal need an exact IoU evaluation.
pub fn assign_best_anchor(gt: &BBox, specs: &[GridSpec]) -> usize {
    let mut best = (f64::NEG_INFINITY, usize::MAX);
    for spec in specs {
        for (a, anchor) in anchors_for(spec.k).iter().enumerate() {
            let ox = axis_overlaps(spec.cols, spec.stride, anchor.pw, gt.x, gt.right());
            let oy = axis_overlaps(spec.rows, spec.stride, anchor.ph, gt.y, gt.bottom());
            let cols = near_max(&ox, anchor.pw + gt.w);
            let rows = near_max(&oy, anchor.ph + gt.h);
            let mut local = (f64::NEG_INFINITY, usize::MAX);
            for &r in &rows {
                for &c in &cols {
                    let v = iou(gt, &anchor_placement(*anchor, r, c, spec));
                    let idx = flat_index(specs, SlotIndex { k: spec.k, row: r, col: c, anchor: a });
                    if v > local.0 || (v == local.0 && idx < local.1) {
                        local = (v, idx);
                    }
                }
            }
            if local.0 <= 0.0 {
                // Every placement of this anchor misses gt; the earliest one
                // stands in for all of them.
                local = (0.0, flat_index(specs, SlotIndex { k: spec.k, row: 0, col: 0, anchor: a }));
            }
            if local.0 > best.0 || (local.0 == best.0 && local.1 < best.1) {
                best = local;
            }
        }
    }
    best.1
}

/// Inverse-free decode of raw offsets `(t_x, t_y, t_w, t_h)` at a cell:
/// center `((σ(t_x)+c)·s, (σ(t_y)+r)·s)`, size `(p_w·e^{t_w}, p_h·e^{t_h})`,
/// clipped to the input frame.
pub fn decode_prediction(offsets: [f64; 4], anchor: AnchorBox, row: usize, col: usize, spec: &GridSpec) -> BBox {
    let s = spec.stride as f64;
    let cx = (sigmoid(offsets[0]) + col as f64) * s;
    let cy = (sigmoid(offsets[1]) + row as f64) * s;
    let w = anchor.pw * offsets[2].exp();
    let h = anchor.ph * offsets[3].exp();
    let (wd, ht) = (spec.width_px(), spec.height_px());
    let x0 = (cx - w / 2.0).clamp(0.0, wd);
    let x1 = (cx + w / 2.0).clamp(0.0, wd);
    let y0 = (cy - h / 2.0).clamp(0.0, ht);
    let y1 = (cy + h / 2.0).clamp(0.0, ht);
    BBox::from_corners(x0, y0, x1, y1)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    crate::nn::ops::sigmoid_scalar(x)
}
