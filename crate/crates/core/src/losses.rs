//! Training objective: per-resolution mask loss on the attention maps,
//! softmax cross-entropy over all anchor placements, and box regression at
//! the target placement.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    anchors_for, assign_best_anchor, flat_index, rasterize_mask, sigmoid, unflatten, AnchorBox, BBox, BinaryMask,
    GridSpec, SlotIndex, NUM_RESOLUTIONS,
};
use crate::nn::{ops, Function, Graph, Var};
use crate::tensor::Tensor;

pub const DEFAULT_LAMBDA: f64 = 0.1;
const LOGIT_CLAMP: f64 = 1e-6;

/// Mean binary cross-entropy between probabilities `beta` and `mask`.
pub fn mask_loss_k(beta: &[f64], mask: &BinaryMask) -> Result<f64> {
    if beta.len() != mask.values.len() {
        return Err(Error::Shape(format!("{} probabilities for {} mask cells", beta.len(), mask.values.len())));
    }
    let total: f64 = beta
        .iter()
        .zip(&mask.values)
        .map(|(&b, &y)| if y == 1 { -b.ln() } else { -(1.0 - b).ln() })
        .sum();
    Ok(total / beta.len() as f64)
}

fn bce_logit(s: f64, y: f64) -> f64 {
    s.max(0.0) - s * y + (-s.abs()).exp().ln_1p()
}

/// [`mask_loss_k`] evaluated from pre-sigmoid scores.
pub fn mask_loss_from_logits(logits: &[f64], mask: &BinaryMask) -> Result<f64> {
    if logits.len() != mask.values.len() {
        return Err(Error::Shape(format!("{} scores for {} mask cells", logits.len(), mask.values.len())));
    }
    let total: f64 = logits.iter().zip(&mask.values).map(|(&s, &y)| bce_logit(s, y as f64)).sum();
    Ok(total / logits.len() as f64)
}

pub fn mask_loss_total(parts: &[f64; NUM_RESOLUTIONS]) -> f64 {
    parts.iter().sum()
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// `−log softmax(logits)[target]`.
pub fn confidence_loss(logits: &[f64], target: usize) -> Result<f64> {
    if target >= logits.len() {
        return Err(Error::IndexOutOfRange { index: target, len: logits.len() });
    }
    Ok(log_sum_exp(logits) - logits[target])
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(LOGIT_CLAMP, 1.0 - LOGIT_CLAMP);
    (p / (1.0 - p)).ln()
}

/// Inverse of [`crate::geometry::decode_prediction`] at a given placement.
pub fn encode_gt_offsets(gt: &BBox, anchor: AnchorBox, row: usize, col: usize, spec: &GridSpec) -> Result<[f64; 4]> {
    if !gt.has_positive_area() {
        return Err(Error::DegenerateBox(format!("{gt:?}")));
    }
    let s = spec.stride as f64;
    let (cx, cy) = gt.center();
    Ok([
        logit(cx / s - col as f64),
        logit(cy / s - row as f64),
        (gt.w / anchor.pw).ln(),
        (gt.h / anchor.ph).ln(),
    ])
}

/// Squared error on `(σ(t_x), σ(t_y), t_w, t_h)`.
pub fn box_regression_loss(pred: &[f64; 4], target: &[f64; 4]) -> f64 {
    let d = [
        sigmoid(pred[0]) - sigmoid(target[0]),
        sigmoid(pred[1]) - sigmoid(target[1]),
        pred[2] - target[2],
        pred[3] - target[3],
    ];
    d.iter().map(|v| v * v).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mask: [f64; NUM_RESOLUTIONS],
    pub mask_total: f64,
    pub confidence: f64,
    pub box_loss: f64,
    pub yolo: f64,
    pub lambda: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.mask.iter().all(|v| v.is_finite()) && self.confidence.is_finite() && self.box_loss.is_finite() && self.total.is_finite()
    }
}

pub fn total_loss(mask: [f64; NUM_RESOLUTIONS], confidence: f64, box_loss: f64, lambda: f64) -> LossBreakdown {
    let mask_total = mask_loss_total(&mask);
    let yolo = confidence + box_loss;
    LossBreakdown {
        mask,
        mask_total,
        confidence,
        box_loss,
        yolo,
        lambda,
        total: yolo + lambda * mask_total,
    }
}

/// Supervision for one sample in network-input pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundingTarget {
    pub index: usize,
    pub offsets: [f64; 4],
    pub masks: [BinaryMask; NUM_RESOLUTIONS],
}

impl GroundingTarget {
    /// Resolution and anchor come from the best-IoU placement; the cell is
    /// the one containing the box center, which always attains the same
    /// IoU (per-axis overlap never grows with distance from the center), so
    /// the encoded offsets are exactly decodable.
    pub fn build(gt: &BBox, specs: &[GridSpec; NUM_RESOLUTIONS]) -> Result<Self> {
        if !gt.has_positive_area() {
            return Err(Error::DegenerateBox(format!("{gt:?}")));
        }
        let best = unflatten(specs, assign_best_anchor(gt, specs))?;
        let spec = &specs[best.k];
        let (cx, cy) = gt.center();
        let s = spec.stride as f64;
        let col = ((cx / s).floor().max(0.0) as usize).min(spec.cols - 1);
        let row = ((cy / s).floor().max(0.0) as usize).min(spec.rows - 1);
        let slot = SlotIndex { row, col, ..best };
        let anchor = anchors_for(slot.k)[slot.anchor];
        Ok(Self {
            index: flat_index(specs, slot),
            offsets: encode_gt_offsets(gt, anchor, row, col, spec)?,
            masks: std::array::from_fn(|k| rasterize_mask(gt, &specs[k])),
        })
    }
}

// ---------------------------------------------------------------------------
// Batched differentiable forms; each returns a batch-mean scalar.

struct BceWithLogits {
    logits: Var,
    targets: Tensor,
}

/// Mean BCE of `σ(logits)` against 0/1 `targets`, both `N × HW`.
pub fn bce_with_logits(g: &mut Graph, logits: Var, targets: Tensor) -> Var {
    assert_eq!(g.shape(logits), targets.shape());
    let n = targets.numel() as f64;
    let v: f64 = g.value(logits).data().iter().zip(targets.data()).map(|(&s, &y)| bce_logit(s, y)).sum::<f64>() / n;
    g.push(Tensor::scalar(v), BceWithLogits { logits, targets })
}

impl Function for BceWithLogits {
    fn inputs(&self) -> Vec<Var> {
        vec![self.logits]
    }

    fn backward(&self, g: &Graph, grad: &Tensor, _needs: &[bool]) -> Vec<Option<Tensor>> {
        let scale = grad.item() / self.targets.numel() as f64;
        let d = g.value(self.logits).data().iter().zip(self.targets.data()).map(|(&s, &y)| (sigmoid(s) - y) * scale).collect();
        vec![Some(Tensor::new(self.targets.shape(), d))]
    }
}

struct SoftmaxCrossEntropy {
    logits: Var,
    targets: Vec<usize>,
}

/// Mean over the batch of `−log softmax(logits[n])[targets[n]]`; `logits`
/// is `N × m`.
pub fn softmax_cross_entropy(g: &mut Graph, logits: Var, targets: &[usize]) -> Var {
    let s = g.shape(logits).to_vec();
    assert_eq!(s[0], targets.len());
    let m = s[1];
    let lv = g.value(logits).data();
    let v: f64 = targets
        .iter()
        .enumerate()
        .map(|(n, &t)| {
            assert!(t < m);
            let row = &lv[n * m..(n + 1) * m];
            log_sum_exp(row) - row[t]
        })
        .sum::<f64>()
        / targets.len() as f64;
    g.push(Tensor::scalar(v), SoftmaxCrossEntropy { logits, targets: targets.to_vec() })
}

impl Function for SoftmaxCrossEntropy {
    fn inputs(&self) -> Vec<Var> {
        vec![self.logits]
    }

    fn backward(&self, g: &Graph, grad: &Tensor, _needs: &[bool]) -> Vec<Option<Tensor>> {
        let s = g.shape(self.logits);
        let m = s[1];
        let scale = grad.item() / self.targets.len() as f64;
        let lv = g.value(self.logits).data();
        let mut d = vec![0.0; lv.len()];
        for (n, &t) in self.targets.iter().enumerate() {
            let row = &lv[n * m..(n + 1) * m];
            let lse = log_sum_exp(row);
            for (o, &x) in d[n * m..(n + 1) * m].iter_mut().zip(row) {
                *o = (x - lse).exp() * scale;
            }
            d[n * m + t] -= scale;
        }
        vec![Some(Tensor::new(s, d))]
    }
}

struct BoxRegression {
    offsets: Vec<[f64; 4]>,
    raw: Var,
    targets: Vec<(usize, [f64; 4])>,
}

/// Mean over the batch of [`box_regression_loss`] at each sample's target
/// slot. `raw` is the `N × m × 4` offset tensor.
pub fn box_regression(g: &mut Graph, raw: Var, targets: &[(usize, [f64; 4])]) -> Var {
    let s = g.shape(raw).to_vec();
    assert_eq!(s[0], targets.len());
    let m = s[1];
    let rv = g.value(raw).data();
    let offsets: Vec<[f64; 4]> = targets
        .iter()
        .enumerate()
        .map(|(n, &(i, _))| {
            let o = (n * m + i) * 4;
            [rv[o], rv[o + 1], rv[o + 2], rv[o + 3]]
        })
        .collect();
    let v = offsets.iter().zip(targets).map(|(p, (_, t))| box_regression_loss(p, t)).sum::<f64>() / targets.len() as f64;
    g.push(Tensor::scalar(v), BoxRegression { offsets, raw, targets: targets.to_vec() })
}

impl Function for BoxRegression {
    fn inputs(&self) -> Vec<Var> {
        vec![self.raw]
    }

    fn backward(&self, g: &Graph, grad: &Tensor, _needs: &[bool]) -> Vec<Option<Tensor>> {
        let s = g.shape(self.raw);
        let m = s[1];
        let scale = grad.item() / self.targets.len() as f64;
        let mut d = vec![0.0; s.iter().product()];
        for (n, (p, (i, t))) in self.offsets.iter().zip(&self.targets).enumerate() {
            let o = (n * m + i) * 4;
            for c in 0..2 {
                let sp = sigmoid(p[c]);
                d[o + c] = 2.0 * (sp - sigmoid(t[c])) * sp * (1.0 - sp) * scale;
            }
            for c in 2..4 {
                d[o + c] = 2.0 * (p[c] - t[c]) * scale;
            }
        }
        vec![Some(Tensor::new(s, d))]
    }
}

/// Scalar nodes of the objective for one batch.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub mask: [Var; NUM_RESOLUTIONS],
    pub confidence: Var,
    pub box_loss: Var,
    pub total: Var,
}

impl LossVars {
    pub fn breakdown(&self, g: &Graph, lambda: f64) -> LossBreakdown {
        let mask = self.mask.map(|v| g.value(v).item());
        let mut b = total_loss(mask, g.value(self.confidence).item(), g.value(self.box_loss).item(), lambda);
        // Report the value actually optimized.
        b.total = g.value(self.total).item();
        b
    }
}

/// Records the full objective. With `lambda == 0` the mask terms are
/// computed for logging but kept out of the optimized sum.
pub fn objective(
    g: &mut Graph,
    attention_logits: [Var; NUM_RESOLUTIONS],
    offsets: Var,
    logits: Var,
    targets: &[GroundingTarget],
    lambda: f64,
) -> LossVars {
    let n = targets.len();
    let mask = std::array::from_fn(|k| {
        let cells = targets[0].masks[k].values.len();
        let data = targets.iter().flat_map(|t| t.masks[k].as_f64()).collect();
        bce_with_logits(g, attention_logits[k], Tensor::new(&[n, cells], data))
    });
    let idx: Vec<usize> = targets.iter().map(|t| t.index).collect();
    let confidence = softmax_cross_entropy(g, logits, &idx);
    let box_targets: Vec<_> = targets.iter().map(|t| (t.index, t.offsets)).collect();
    let box_loss = box_regression(g, offsets, &box_targets);
    let mut terms = vec![(confidence, 1.0), (box_loss, 1.0)];
    if lambda > 0.0 {
        terms.extend(mask.iter().map(|&v| (v, lambda)));
    }
    let total = ops::weighted_sum(g, &terms);
    LossVars {
        mask,
        confidence,
        box_loss,
        total,
    }
}
