//! Per-cell fusion of visual, text and attended features, the grounding
//! head, and the single softmax over every anchor placement.

use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{anchors_for, decode_prediction, num_predictions, unflatten, BBox, GridSpec, ANCHORS_PER_CELL};
use crate::nn::layers::Linear;
use crate::nn::{ops, Ctx, Function, Graph, ParamGroup, ParamStore, Var};
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-8;
/// `(t_x, t_y, t_w, t_h, logit)` per anchor.
pub const SLOT_WIDTH: usize = 5;

fn normalize_row(x: &[f64], out: &mut [f64]) -> f64 {
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
    for (o, v) in out.iter_mut().zip(x) {
        *o = v / norm;
    }
    norm
}

/// Row-wise `x / max(‖x‖₂, ε)` followed by concatenation: `HW × 3D`.
pub fn normalize_and_concat(grid: &Tensor, text: &Tensor, attended: &Tensor) -> Result<Tensor> {
    let shape = grid.shape();
    if shape.len() != 2 || text.shape() != shape || attended.shape() != shape {
        return Err(Error::Shape(format!(
            "fusion inputs {:?}, {:?}, {:?} differ",
            grid.shape(),
            text.shape(),
            attended.shape()
        )));
    }
    let (hw, d) = (shape[0], shape[1]);
    let mut out = vec![0.0; hw * 3 * d];
    for i in 0..hw {
        for (b, t) in [grid, text, attended].into_iter().enumerate() {
            let dst = &mut out[i * 3 * d + b * d..i * 3 * d + (b + 1) * d];
            normalize_row(&t.data()[i * d..(i + 1) * d], dst);
        }
    }
    Ok(Tensor::new(&[hw, 3 * d], out))
}

struct L2Normalize {
    x: Var,
}

/// Normalizes every vector along the last axis.
pub fn l2_normalize(g: &mut Graph, x: Var) -> Var {
    let s = g.shape(x).to_vec();
    let d = *s.last().unwrap();
    let mut out = vec![0.0; g.value(x).numel()];
    for (src, dst) in g.value(x).data().chunks(d).zip(out.chunks_mut(d)) {
        normalize_row(src, dst);
    }
    g.push(Tensor::new(&s, out), L2Normalize { x })
}

impl Function for L2Normalize {
    fn inputs(&self) -> Vec<Var> {
        vec![self.x]
    }

    fn backward(&self, g: &Graph, grad: &Tensor, _needs: &[bool]) -> Vec<Option<Tensor>> {
        let s = g.shape(self.x);
        let d = *s.last().unwrap();
        let mut dx = vec![0.0; grad.numel()];
        let mut y = vec![0.0; d];
        for ((src, dy), out) in g.value(self.x).data().chunks(d).zip(grad.data().chunks(d)).zip(dx.chunks_mut(d)) {
            let raw = src.iter().map(|v| v * v).sum::<f64>().sqrt();
            let norm = normalize_row(src, &mut y);
            if raw > NORM_EPS {
                let dot: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
                for ((o, &yi), &gi) in out.iter_mut().zip(&y).zip(dy) {
                    *o = (gi - yi * dot) / norm;
                }
            } else {
                for (o, &gi) in out.iter_mut().zip(dy) {
                    *o = gi / norm;
                }
            }
        }
        vec![Some(Tensor::new(s, dx))]
    }
}

/// `1×1` convolution over the normalized `[G; T′; V]` concatenation.
#[derive(Debug, Clone)]
pub struct Fusion {
    pub linear: Linear,
    pub rectify: bool,
}

impl Fusion {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, fused_dim: usize, rectify: bool, rng: &mut impl Rng) -> Self {
        Self {
            linear: Linear::new(store, name, 3 * dim, fused_dim, true, ParamGroup::Head, rng),
            rectify,
        }
    }

    /// Inputs `N × HW × D`; output `N × HW × D′`.
    pub fn forward(&self, ctx: &mut Ctx, grid: Var, text: Var, attended: Var) -> Result<Var> {
        let s = ctx.graph.shape(grid).to_vec();
        if ctx.graph.shape(text) != s.as_slice() || ctx.graph.shape(attended) != s.as_slice() {
            return Err(Error::Shape(format!(
                "fusion inputs {s:?}, {:?}, {:?} differ",
                ctx.graph.shape(text),
                ctx.graph.shape(attended)
            )));
        }
        let parts: Vec<Var> = [grid, text, attended].iter().map(|&v| l2_normalize(&mut ctx.graph, v)).collect();
        let cat = ops::concat(&mut ctx.graph, &parts, 2);
        let y = self.linear.forward(ctx, cat);
        Ok(if self.rectify { ops::relu(&mut ctx.graph, y) } else { y })
    }
}

/// Shared `1×1` head: `3 × 5` channels per cell.
#[derive(Debug, Clone)]
pub struct GroundingHead {
    pub linear: Linear,
}

impl GroundingHead {
    pub fn new(store: &mut ParamStore, name: &str, fused_dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            linear: Linear::new(store, name, fused_dim, ANCHORS_PER_CELL * SLOT_WIDTH, true, ParamGroup::Head, rng),
        }
    }

    /// `N × HW × D′` to `N × (HW·3) × 5`, cell-major and anchor-minor.
    pub fn forward(&self, ctx: &mut Ctx, fused: Var) -> Var {
        let y = self.linear.forward(ctx, fused);
        let s = ctx.graph.shape(y).to_vec();
        ops::reshape(&mut ctx.graph, y, &[s[0], s[1] * ANCHORS_PER_CELL, SLOT_WIDTH])
    }
}

/// Stacks the per-resolution head outputs, resolution-major: `N × m × 5`.
pub fn predict(g: &mut Graph, heads: &[Var]) -> Var {
    ops::concat(g, heads, 1)
}

/// Splits `N × m × 5` into offsets (`N × m × 4`) and logits (`N × m`).
pub fn split_prediction(g: &mut Graph, raw: Var) -> (Var, Var) {
    let s = g.shape(raw).to_vec();
    let offsets = ops::slice_last(g, raw, 0, 4);
    let logits = ops::slice_last(g, raw, 4, 1);
    let logits = ops::reshape(g, logits, &[s[0], s[1]]);
    (offsets, logits)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Every anchor's offsets plus one distribution over all `m` placements.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub offsets: Vec<[f64; 4]>,
    pub logits: Vec<f64>,
    pub confidence: Vec<f64>,
}

/// Winning placement of a [`PredictionSet`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Selection {
    pub index: usize,
    pub bbox: BBox,
    pub confidence: f64,
}

impl PredictionSet {
    /// From one sample's `m × 5` slab.
    pub fn from_raw(raw: &[f64], specs: &[GridSpec]) -> Result<Self> {
        let m = num_predictions(specs);
        if raw.len() != m * SLOT_WIDTH {
            return Err(Error::Shape(format!("{} values for {m} slots", raw.len())));
        }
        let offsets = raw.chunks(SLOT_WIDTH).map(|c| [c[0], c[1], c[2], c[3]]).collect();
        let logits: Vec<f64> = raw.chunks(SLOT_WIDTH).map(|c| c[4]).collect();
        Ok(Self {
            confidence: softmax(&logits),
            offsets,
            logits,
        })
    }

    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    /// Decodes the most confident placement; the lowest index wins ties.
    pub fn select_box(&self, specs: &[GridSpec]) -> Result<Selection> {
        let mut index = 0;
        for (i, &c) in self.confidence.iter().enumerate() {
            if c > self.confidence[index] {
                index = i;
            }
        }
        let slot = unflatten(specs, index)?;
        let spec = &specs[slot.k];
        let anchor = anchors_for(slot.k)[slot.anchor];
        Ok(Selection {
            index,
            bbox: decode_prediction(self.offsets[index], anchor, slot.row, slot.col, spec),
            confidence: self.confidence[index],
        })
    }
}
