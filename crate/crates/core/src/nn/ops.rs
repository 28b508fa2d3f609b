//! General-purpose differentiable operations.
//!
//! Image tensors are `N × C × H × W`. Per-cell features after the backbone
//! are "rows": `N × cells × channels`, so 1×1 convolutions become [`linear`].

use super::graph::{Function, Graph, Var};
use crate::exec;
use crate::tensor::{gemm, Tensor};

pub const BN_EPS: f64 = 1e-5;

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

// ---------------------------------------------------------------------------
// Convolution

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

#[allow(clippy::too_many_arguments)]
fn im2col(x: &[f64], c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, cols: &mut [f64]) {
    let ho = conv_out(h, k, stride, pad);
    let wo = conv_out(w, k, stride, pad);
    let p = ho * wo;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * p..][..p];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let out = &mut row[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, o) in out.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *o = if ix < 0 || ix >= w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im(cols: &[f64], c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, dx: &mut [f64]) {
    let ho = conv_out(h, k, stride, pad);
    let wo = conv_out(w, k, stride, pad);
    let p = ho * wo;
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * p..][..p];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

struct Conv2d {
    x: Var,
    w: Var,
    stride: usize,
    pad: usize,
}

impl Conv2d {
    fn dims(&self, g: &Graph) -> [usize; 8] {
        let xs = g.shape(self.x);
        let ws = g.shape(self.w);
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, k) = (ws[0], ws[2]);
        let ho = conv_out(h, k, self.stride, self.pad);
        let wo = conv_out(w, k, self.stride, self.pad);
        [n, c, h, w, o, k, ho, wo]
    }

    fn pointwise(&self, k: usize) -> bool {
        k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// 2-D convolution without bias. `x`: `N×C×H×W`, `w`: `O×C×k×k`.
pub fn conv2d(g: &mut Graph, x: Var, w: Var, stride: usize, pad: usize) -> Var {
    let op = Conv2d { x, w, stride, pad };
    let xs = g.shape(x);
    let ws = g.shape(w);
    assert_eq!(xs.len(), 4, "conv2d input must be NCHW, got {xs:?}");
    assert_eq!(ws[1], xs[1], "conv2d channel mismatch: {xs:?} vs {ws:?}");
    assert_eq!(ws[2], ws[3]);
    let [n, c, h, wd, o, k, ho, wo] = op.dims(g);
    let (ckk, p) = (c * k * k, ho * wo);
    let xv = g.value(x).data();
    let wv = g.value(w).data();
    let mut out = vec![0.0; n * o * p];
    let pointwise = op.pointwise(k);
    exec::for_each_chunk(&mut out, o * p, |s, y| {
        let xs = &xv[s * c * h * wd..(s + 1) * c * h * wd];
        if pointwise {
            gemm(o, ckk, p, wv, false, xs, false, y, false);
        } else {
            let mut cols = vec![0.0; ckk * p];
            im2col(xs, c, h, wd, k, stride, pad, &mut cols);
            gemm(o, ckk, p, wv, false, &cols, false, y, false);
        }
    });
    g.push(Tensor::new(&[n, o, ho, wo], out), op)
}

impl Function for Conv2d {
    fn inputs(&self) -> Vec<Var> {
        vec![self.x, self.w]
    }

    fn backward(&self, g: &Graph, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let [n, c, h, wd, o, k, ho, wo] = self.dims(g);
        let (ckk, p) = (c * k * k, ho * wo);
        let xv = g.value(self.x).data();
        let wv = g.value(self.w).data();
        let dy = grad.data();
        let pointwise = self.pointwise(k);
        let (stride, pad) = (self.stride, self.pad);

        let dw = needs[1].then(|| {
            let parts = exec::map(n, |s| {
                let xs = &xv[s * c * h * wd..(s + 1) * c * h * wd];
                let dys = &dy[s * o * p..(s + 1) * o * p];
                let mut part = vec![0.0; o * ckk];
                if pointwise {
                    gemm(o, p, ckk, dys, false, xs, true, &mut part, false);
                } else {
                    let mut cols = vec![0.0; ckk * p];
                    im2col(xs, c, h, wd, k, stride, pad, &mut cols);
                    gemm(o, p, ckk, dys, false, &cols, true, &mut part, false);
                }
                part
            });
            Tensor::new(g.shape(self.w), exec::sum_partials(parts, o * ckk))
        });

        let dx = needs[0].then(|| {
            let mut dx = vec![0.0; n * c * h * wd];
            exec::for_each_chunk(&mut dx, c * h * wd, |s, dxs| {
                let dys = &dy[s * o * p..(s + 1) * o * p];
                if pointwise {
                    gemm(ckk, o, p, wv, true, dys, false, dxs, false);
                } else {
                    let mut dcols = vec![0.0; ckk * p];
                    gemm(ckk, o, p, wv, true, dys, false, &mut dcols, false);
                    col2im(&dcols, c, h, wd, k, stride, pad, dxs);
                }
            });
            Tensor::new(g.shape(self.x), dx)
        });
        vec![dx, dw]
    }
}

// ---------------------------------------------------------------------------
// Batch normalization

struct BatchNorm {
    x: Var,
    gamma: Var,
    beta: Var,
    axis: usize,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    /// Whether mean/variance came from this batch (and so depend on `x`).
    batch_stats: bool,
}

/// Batch statistics of a training-mode batch norm.
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, for the running estimate.
    pub var: Vec<f64>,
}

/// Normalizes over every axis except `axis` using batch statistics.
pub fn batch_norm_train(g: &mut Graph, x: Var, gamma: Var, beta: Var, axis: usize) -> (Var, BatchStats) {
    let (outer, ch, inner) = split_axis(g.shape(x), axis);
    let count = (outer * inner) as f64;
    let xv = g.value(x).data();
    let mut mean = vec![0.0; ch];
    let mut var = vec![0.0; ch];
    for o in 0..outer {
        for (c, m) in mean.iter_mut().enumerate() {
            let base = (o * ch + c) * inner;
            *m += xv[base..base + inner].iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    for o in 0..outer {
        for c in 0..ch {
            let base = (o * ch + c) * inner;
            var[c] += xv[base..base + inner].iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>();
        }
    }
    let biased: Vec<f64> = var.iter().map(|v| v / count).collect();
    let unbiased: Vec<f64> = var.iter().map(|v| v / (count - 1.0).max(1.0)).collect();
    let inv_std: Vec<f64> = biased.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let var = batch_norm_apply(g, x, gamma, beta, axis, &mean, inv_std, true);
    (var, BatchStats { mean, var: unbiased })
}

/// Normalizes with fixed (running) statistics.
pub fn batch_norm_eval(g: &mut Graph, x: Var, gamma: Var, beta: Var, axis: usize, mean: &[f64], var: &[f64]) -> Var {
    let inv_std = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    batch_norm_apply(g, x, gamma, beta, axis, mean, inv_std, false)
}

#[allow(clippy::too_many_arguments)]
fn batch_norm_apply(
    g: &mut Graph,
    x: Var,
    gamma: Var,
    beta: Var,
    axis: usize,
    mean: &[f64],
    inv_std: Vec<f64>,
    batch_stats: bool,
) -> Var {
    let shape = g.shape(x).to_vec();
    let (outer, ch, inner) = split_axis(&shape, axis);
    assert_eq!(g.value(gamma).numel(), ch);
    assert_eq!(mean.len(), ch);
    let xv = g.value(x).data();
    let gv = g.value(gamma).data();
    let bv = g.value(beta).data();
    let mut xhat = vec![0.0; xv.len()];
    let mut out = vec![0.0; xv.len()];
    for o in 0..outer {
        for c in 0..ch {
            let base = (o * ch + c) * inner;
            for i in base..base + inner {
                let h = (xv[i] - mean[c]) * inv_std[c];
                xhat[i] = h;
                out[i] = gv[c] * h + bv[c];
            }
        }
    }
    let op = BatchNorm {
        x,
        gamma,
        beta,
        axis,
        xhat,
        inv_std,
        batch_stats,
    };
    g.push(Tensor::new(&shape, out), op)
}

impl Function for BatchNorm {
    fn inputs(&self) -> Vec<Var> {
        vec![self.x, self.gamma, self.beta]
    }

    fn backward(&self, g: &Graph, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let (outer, ch, inner) = split_axis(g.shape(self.x), self.axis);
        let count = (outer * inner) as f64;
        let dy = grad.data();
        let gv = g.value(self.gamma).data();
        let mut dgamma = vec![0.0; ch];
        let mut dbeta = vec![0.0; ch];
        for o in 0..outer {
            for c in 0..ch {
                let base = (o * ch + c) * inner;
                for (&d, &xh) in dy[base..base + inner].iter().zip(&self.xhat[base..base + inner]) {
                    dgamma[c] += d * xh;
                    dbeta[c] += d;
                }
            }
        }
        let dx = needs[0].then(|| {
            let mut dx = vec![0.0; dy.len()];
            for o in 0..outer {
                for c in 0..ch {
                    let base = (o * ch + c) * inner;
                    let scale = gv[c] * self.inv_std[c];
                    for i in base..base + inner {
                        dx[i] = if self.batch_stats {
                            scale * (dy[i] - dbeta[c] / count - self.xhat[i] * dgamma[c] / count)
                        } else {
                            scale * dy[i]
                        };
                    }
                }
            }
            Tensor::new(g.shape(self.x), dx)
        });
        vec![
            dx,
            Some(Tensor::new(&[ch], dgamma)),
            Some(Tensor::new(&[ch], dbeta)),
        ]
    }
}

// ---------------------------------------------------------------------------
// Element-wise

struct LeakyRelu {
    x: Var,
    slope: f64,
}

pub fn leaky_relu(g: &mut Graph, x: Var, slope: f64) -> Var {
    g.note_kinks(x);
    let out = g.value(x).map(|v| if v > 0.0 { v } else { slope * v });
    g.push(out, LeakyRelu { x, slope })
}

pub fn relu(g: &mut Graph, x: Var) -> Var {
    leaky_relu(g, x, 0.0)
}

impl Function for LeakyRelu {
    fn inputs(&self) -> Vec<Var> {
        vec![self.x]
    }

    fn backward(&self, g: &Graph, grad: &Tensor, _needs: &[bool]) -> Vec<Option<Tensor>> {
        let x = g.value(self.x).data();
        let d = grad
            .data()
            .iter()
            .zip(x)
            .map(|(&d, &v)| if v > 0.0 { d } else { self.slope * d })
            .collect();
        vec![Some(Tensor::new(grad.shape(), d))]
    }
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

struct Sigmoid {
    x: Var,
    out: Vec<f64>,
}

pub fn sigmoid(g: &mut Graph, x: Var) -> Var {
    let out = g.value(x).map(sigmoid_scalar);
    let cached = out.data().to_vec();
    g.push(out, Sigmoid { x, out: cached })
}

impl Function for Sigmoid {
    fn inputs(&self) -> Vec<Var> {
        vec![self.x]
    }

    fn backward(&self, _g: &Graph, grad: &Tensor, _needs: &[bool]) -> Vec<Option<Tensor>> {
        let d = grad
            .data()
            .iter()
            .zip(&self.out)
            .map(|(&d, &s)| d * s * (1.0 - s))
            .collect();
        vec![Some(Tensor::new(grad.shape(), d))]
    }
}

struct Add {
    a: Var,
    b: Var,
}

pub fn add(g: &mut Graph, a: Var, b: Var) -> Var {
    assert_eq!(g.shape(a), g.shape(b), "add shape mismatch");
    let mut out = g.value(a).clone();
    out.add_assign(g.value(b));
    g.push(out, Add { a, b })
}

impl Function for Add {
    fn inputs(&self) -> Vec<Var> {
        vec![self.a, self.b]
    }

    fn backward(&self, _g: &Graph, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        vec![needs[0].then(|| grad.clone()), needs[1].then(|| grad.clone())]
    }
}

/// Weighted sum of same-shaped values (used to combine scalar losses).
struct WeightedSum {
    terms: Vec<(Var, f64)>,
}

pub fn weighted_sum(g: &mut Graph, terms: &[(Var, f64)]) -> Var {
    assert!(!terms.is_empty());
    let mut out = Tensor::zeros(g.shape(terms[0].0));
    for &(v, w) in terms {
        for (o, x) in out.data_mut().iter_mut().zip(g.value(v).data()) {
            *o += w * x;
        }
    }
    g.push(out, WeightedSum { terms: terms.to_vec() })
}

impl Function for WeightedSum {
    fn inputs(&self) -> Vec<Var> {
        self.terms.iter().map(|t| t.0).collect()
    }

    fn backward(&self, _g: &Graph, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        self.terms
            .iter()
            .zip(needs)
            .map(|(&(_, w), &need)| {
                need.then(|| {
                    let mut d = grad.clone();
                    d.scale(w);
                    d
                })
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Layout

struct Upsample2 {
    x: Var,
}

/// Nearest-neighbour ×2 upsampling of an `N×C×H×W` tensor.
pub fn upsample2(g: &mut Graph, x: Var) -> Var {
    let s = g.shape(x).to_vec();
    let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
    let xv = g.value(x).data();
    let mut out = vec![0.0; nc * 4 * h * w];
    for p in 0..nc {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                out[(p * 2 * h + y) * 2 * w + xx] = xv[(p * h + y / 2) * w + xx / 2];
            }
        }
    }
    g.push(Tensor::new(&[s[0], s[1], 2 * h, 2 * w], out), Upsample2 { x })
}

impl Function for Upsample2 {
    fn inputs(&self) -> Vec<Var> {
        vec![self.x]
    }

    fn backward(&self, g: &Graph, grad: &Tensor, _needs: &[bool]) -> Vec<Option<Tensor>> {
        let s = g.shape(self.x);
        let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
        let dy = grad.data();
        let mut dx = vec![0.0; nc * h * w];
        for p in 0..nc {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    dx[(p * h + y / 2) * w + xx / 2] += dy[(p * 2 * h + y) * 2 * w + xx];
                }
            }
        }
        vec![Some(Tensor::new(s, dx))]
    }
}

struct Concat {
    inputs: Vec<Var>,
    axis: usize,
}

/// Concatenates along `axis`; all other extents must agree.
pub fn concat(g: &mut Graph, inputs: &[Var], axis: usize) -> Var {
    assert!(!inputs.is_empty());
    let first = g.shape(inputs[0]).to_vec();
    let mut total = 0;
    for &v in inputs {
        let s = g.shape(v);
        assert_eq!(s.len(), first.len(), "concat rank mismatch");
        for (d, (&a, &b)) in s.iter().zip(&first).enumerate() {
            assert!(d == axis || a == b, "concat shape mismatch {s:?} vs {first:?} on axis {axis}");
        }
        total += s[axis];
    }
    let (outer, _, inner) = split_axis(&first, axis);
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for &v in inputs {
            let len = g.shape(v)[axis] * inner;
            out.extend_from_slice(&g.value(v).data()[o * len..(o + 1) * len]);
        }
    }
    let mut shape = first;
    shape[axis] = total;
    g.push(Tensor::new(&shape, out), Concat { inputs: inputs.to_vec(), axis })
}

impl Function for Concat {
    fn inputs(&self) -> Vec<Var> {
        self.inputs.clone()
    }

    fn backward(&self, g: &Graph, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let (outer, total, inner) = split_axis(grad.shape(), self.axis);
        let dy = grad.data();
        let mut offset = 0;
        let mut out = Vec::new();
        for (&v, &need) in self.inputs.iter().zip(needs) {
            let len = g.shape(v)[self.axis] * inner;
            if need {
                let mut d = Vec::with_capacity(outer * len);
                for o in 0..outer {
                    let start = o * total * inner + offset;
                    d.extend_from_slice(&dy[start..start + len]);
                }
                out.push(Some(Tensor::new(g.shape(v), d)));
            } else {
                out.push(None);
            }
            offset += len;
        }
        out
    }
}

struct Reshape {
    x: Var,
}

pub fn reshape(g: &mut Graph, x: Var, shape: &[usize]) -> Var {
    let out = g.value(x).clone().reshape(shape);
    g.push(out, Reshape { x })
}

impl Function for Reshape {
    fn inputs(&self) -> Vec<Var> {
        vec![self.x]
    }

    fn backward(&self, g: &Graph, grad: &Tensor, _needs: &[bool]) -> Vec<Option<Tensor>> {
        vec![Some(grad.clone().reshape(g.shape(self.x)))]
    }
}

struct ToRows {
    x: Var,
}

/// `N×C×H×W` → `N×(H·W)×C`, cells in row-major order.
pub fn to_rows(g: &mut Graph, x: Var) -> Var {
    let s = g.shape(x).to_vec();
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    let xv = g.value(x).data();
    let mut out = vec![0.0; n * hw * c];
    for b in 0..n {
        for ch in 0..c {
            for i in 0..hw {
                out[(b * hw + i) * c + ch] = xv[(b * c + ch) * hw + i];
            }
        }
    }
    g.push(Tensor::new(&[n, hw, c], out), ToRows { x })
}

impl Function for ToRows {
    fn inputs(&self) -> Vec<Var> {
        vec![self.x]
    }

    fn backward(&self, g: &Graph, grad: &Tensor, _needs: &[bool]) -> Vec<Option<Tensor>> {
        let s = g.shape(self.x);
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let dy = grad.data();
        let mut dx = vec![0.0; n * c * hw];
        for b in 0..n {
            for ch in 0..c {
                for i in 0..hw {
                    dx[(b * c + ch) * hw + i] = dy[(b * hw + i) * c + ch];
                }
            }
        }
        vec![Some(Tensor::new(s, dx))]
    }
}

struct SliceLast {
    x: Var,
    start: usize,
    len: usize,
}

/// Keeps `len` entries of the last axis starting at `start`.
pub fn slice_last(g: &mut Graph, x: Var, start: usize, len: usize) -> Var {
    let s = g.shape(x).to_vec();
    let last = *s.last().unwrap();
    assert!(start + len <= last);
    let rows = g.value(x).numel() / last;
    let xv = g.value(x).data();
    let mut out = Vec::with_capacity(rows * len);
    for r in 0..rows {
        out.extend_from_slice(&xv[r * last + start..r * last + start + len]);
    }
    let mut shape = s;
    *shape.last_mut().unwrap() = len;
    g.push(Tensor::new(&shape, out), SliceLast { x, start, len })
}

impl Function for SliceLast {
    fn inputs(&self) -> Vec<Var> {
        vec![self.x]
    }

    fn backward(&self, g: &Graph, grad: &Tensor, _needs: &[bool]) -> Vec<Option<Tensor>> {
        let s = g.shape(self.x);
        let last = *s.last().unwrap();
        let mut dx = Tensor::zeros(s);
        let rows = dx.numel() / last;
        let d = dx.data_mut();
        for r in 0..rows {
            d[r * last + self.start..r * last + self.start + self.len]
                .copy_from_slice(&grad.data()[r * self.len..(r + 1) * self.len]);
        }
        vec![Some(dx)]
    }
}

// ---------------------------------------------------------------------------
// Dense

struct Linear {
    x: Var,
    w: Var,
    b: Option<Var>,
}

/// `y = x·Wᵀ + b` over the last axis. `w`: `out×in`, `b`: `out`.
pub fn linear(g: &mut Graph, x: Var, w: Var, b: Option<Var>) -> Var {
    let xs = g.shape(x).to_vec();
    let ws = g.shape(w).to_vec();
    let fan_in = *xs.last().unwrap();
    assert_eq!(ws[1], fan_in, "linear: input width {fan_in} vs weight {ws:?}");
    let fan_out = ws[0];
    let rows = g.value(x).numel() / fan_in;
    let mut out = vec![0.0; rows * fan_out];
    if let Some(b) = b {
        let bv = g.value(b).data();
        for r in out.chunks_mut(fan_out) {
            r.copy_from_slice(bv);
        }
    }
    gemm(rows, fan_in, fan_out, g.value(x).data(), false, g.value(w).data(), true, &mut out, b.is_some());
    let mut shape = xs;
    *shape.last_mut().unwrap() = fan_out;
    g.push(Tensor::new(&shape, out), Linear { x, w, b })
}

impl Function for Linear {
    fn inputs(&self) -> Vec<Var> {
        let mut v = vec![self.x, self.w];
        v.extend(self.b);
        v
    }

    fn backward(&self, g: &Graph, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let ws = g.shape(self.w);
        let (fan_out, fan_in) = (ws[0], ws[1]);
        let rows = grad.numel() / fan_out;
        let dy = grad.data();
        let dx = needs[0].then(|| {
            let mut dx = vec![0.0; rows * fan_in];
            gemm(rows, fan_out, fan_in, dy, false, g.value(self.w).data(), false, &mut dx, false);
            Tensor::new(g.shape(self.x), dx)
        });
        let dw = needs[1].then(|| {
            let mut dw = vec![0.0; fan_out * fan_in];
            gemm(fan_out, rows, fan_in, dy, true, g.value(self.x).data(), false, &mut dw, false);
            Tensor::new(ws, dw)
        });
        let mut out = vec![dx, dw];
        if self.b.is_some() {
            let mut db = vec![0.0; fan_out];
            for r in dy.chunks(fan_out) {
                for (d, v) in db.iter_mut().zip(r) {
                    *d += v;
                }
            }
            out.push(Some(Tensor::new(&[fan_out], db)));
        }
        out
    }
}

struct Embedding {
    table: Var,
    ids: Vec<usize>,
}

/// Row lookup into `table` (`V×E`); output shape is `shape × E`.
pub fn embedding(g: &mut Graph, table: Var, ids: &[usize], shape: &[usize]) -> Var {
    assert_eq!(shape.iter().product::<usize>(), ids.len());
    let ts = g.shape(table);
    let (v, e) = (ts[0], ts[1]);
    let tv = g.value(table).data();
    let mut out = Vec::with_capacity(ids.len() * e);
    for &id in ids {
        assert!(id < v, "token id {id} outside vocabulary of {v}");
        out.extend_from_slice(&tv[id * e..(id + 1) * e]);
    }
    let mut s = shape.to_vec();
    s.push(e);
    g.push(Tensor::new(&s, out), Embedding { table, ids: ids.to_vec() })
}

impl Function for Embedding {
    fn inputs(&self) -> Vec<Var> {
        vec![self.table]
    }

    fn backward(&self, g: &Graph, grad: &Tensor, _needs: &[bool]) -> Vec<Option<Tensor>> {
        let ts = g.shape(self.table);
        let e = ts[1];
        let mut dt = Tensor::zeros(ts);
        let d = dt.data_mut();
        for (row, &id) in self.ids.iter().enumerate() {
            for (a, b) in d[id * e..(id + 1) * e].iter_mut().zip(&grad.data()[row * e..(row + 1) * e]) {
                *a += b;
            }
        }
        vec![Some(dt)]
    }
}

// ---------------------------------------------------------------------------
// Batched products

struct Bmm {
    a: Var,
    b: Var,
    b_t: bool,
}

/// Per-sample `a[n] · b[n]` (or `a[n] · b[n]ᵀ` with `b_t`).
/// `a`: `N×P×Q`; `b`: `N×Q×R`, or `N×R×Q` when transposed.
pub fn bmm(g: &mut Graph, a: Var, b: Var, b_t: bool) -> Var {
    let (sa, sb) = (g.shape(a).to_vec(), g.shape(b).to_vec());
    assert!(sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0], "bmm: {sa:?} × {sb:?}");
    let (n, p, q) = (sa[0], sa[1], sa[2]);
    let r = if b_t { sb[1] } else { sb[2] };
    assert_eq!(if b_t { sb[2] } else { sb[1] }, q, "bmm: inner dims of {sa:?} × {sb:?}");
    let (av, bv) = (g.value(a).data(), g.value(b).data());
    let mut out = vec![0.0; n * p * r];
    exec::for_each_chunk(&mut out, p * r, |i, o| {
        gemm(p, q, r, &av[i * p * q..(i + 1) * p * q], false, &bv[i * q * r..(i + 1) * q * r], b_t, o, false);
    });
    g.push(Tensor::new(&[n, p, r], out), Bmm { a, b, b_t })
}

impl Function for Bmm {
    fn inputs(&self) -> Vec<Var> {
        vec![self.a, self.b]
    }

    fn backward(&self, g: &Graph, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let (sa, sb) = (g.shape(self.a), g.shape(self.b));
        let (n, p, q) = (sa[0], sa[1], sa[2]);
        let r = grad.dim(2);
        let (av, bv, dy) = (g.value(self.a).data(), g.value(self.b).data(), grad.data());
        let da = needs[0].then(|| {
            // dA = dY · Bᵀ  (or dY · B when B was used transposed)
            let mut da = vec![0.0; n * p * q];
            exec::for_each_chunk(&mut da, p * q, |i, o| {
                gemm(p, r, q, &dy[i * p * r..(i + 1) * p * r], false, &bv[i * q * r..(i + 1) * q * r], !self.b_t, o, false);
            });
            Tensor::new(sa, da)
        });
        let db = needs[1].then(|| {
            let mut db = vec![0.0; n * q * r];
            exec::for_each_chunk(&mut db, q * r, |i, o| {
                let (ai, dyi) = (&av[i * p * q..(i + 1) * p * q], &dy[i * p * r..(i + 1) * p * r]);
                if self.b_t {
                    // dB (R×Q) = dYᵀ · A
                    gemm(r, p, q, dyi, true, ai, false, o, false);
                } else {
                    // dB (Q×R) = Aᵀ · dY
                    gemm(q, p, r, ai, true, dyi, false, o, false);
                }
            });
            Tensor::new(sb, db)
        });
        vec![da, db]
    }
}

struct ScaleRows {
    s: Var,
    x: Var,
}

/// `y[n, i, :] = s[n, i] · x[n, i, :]`. `s`: `N×P`, `x`: `N×P×D`.
pub fn scale_rows(g: &mut Graph, s: Var, x: Var) -> Var {
    let (ss, xs) = (g.shape(s).to_vec(), g.shape(x).to_vec());
    assert!(xs.len() == 3 && ss == xs[..2], "scale_rows: {ss:?} vs {xs:?}");
    let d = xs[2];
    let sv = g.value(s).data();
    let out: Vec<f64> = g.value(x).data().iter().enumerate().map(|(i, v)| v * sv[i / d]).collect();
    g.push(Tensor::new(&xs, out), ScaleRows { s, x })
}

impl Function for ScaleRows {
    fn inputs(&self) -> Vec<Var> {
        vec![self.s, self.x]
    }

    fn backward(&self, g: &Graph, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let d = g.shape(self.x)[2];
        let (sv, xv, dy) = (g.value(self.s).data(), g.value(self.x).data(), grad.data());
        let ds = needs[0].then(|| {
            let v = dy.chunks(d).zip(xv.chunks(d)).map(|(a, b)| a.iter().zip(b).map(|(p, q)| p * q).sum()).collect();
            Tensor::new(g.shape(self.s), v)
        });
        let dx = needs[1].then(|| Tensor::new(g.shape(self.x), dy.iter().enumerate().map(|(i, v)| v * sv[i / d]).collect()));
        vec![ds, dx]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::verification::{check_graph_gradients, uniform_tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn conv2d_matches_direct_sum() {
        let mut r = rng();
        let x = uniform_tensor(&[1, 2, 5, 5], 1.0, &mut r);
        let w = uniform_tensor(&[3, 2, 3, 3], 1.0, &mut r);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let wv = g.constant(w.clone());
        let y = conv2d(&mut g, xv, wv, 2, 1);
        assert_eq!(g.shape(y), &[1, 3, 3, 3]);
        for o in 0..3 {
            for oy in 0..3 {
                for ox in 0..3 {
                    let mut s = 0.0;
                    for c in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox * 2 + kx) as isize - 1;
                                if (0..5).contains(&iy) && (0..5).contains(&ix) {
                                    s += x.at(&[0, c, iy as usize, ix as usize]) * w.at(&[o, c, ky, kx]);
                                }
                            }
                        }
                    }
                    assert!((g.value(y).at(&[0, o, oy, ox]) - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv2d_gradients() {
        let mut r = rng();
        let report = check_graph_gradients(
            &[uniform_tensor(&[2, 2, 5, 5], 1.0, &mut r), uniform_tensor(&[3, 2, 3, 3], 0.5, &mut r)],
            |g, v| {
                let y = conv2d(g, v[0], v[1], 2, 1);
                leaky_relu(g, y, 0.1)
            },
            1e-4,
            60,
            &mut r,
        );
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }

    #[test]
    fn pointwise_conv_gradients() {
        let mut r = rng();
        let report = check_graph_gradients(
            &[uniform_tensor(&[2, 3, 2, 2], 1.0, &mut r), uniform_tensor(&[4, 3, 1, 1], 0.5, &mut r)],
            |g, v| conv2d(g, v[0], v[1], 1, 0),
            1e-4,
            40,
            &mut r,
        );
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn batch_norm_gradients_with_batch_statistics() {
        let mut r = rng();
        let report = check_graph_gradients(
            &[
                uniform_tensor(&[3, 2, 2, 2], 1.0, &mut r),
                uniform_tensor(&[2], 1.0, &mut r),
                uniform_tensor(&[2], 1.0, &mut r),
            ],
            |g, v| {
                let (y, _) = batch_norm_train(g, v[0], v[1], v[2], 1);
                sigmoid(g, y)
            },
            1e-4,
            40,
            &mut r,
        );
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }

    #[test]
    fn batch_norm_train_output_is_standardized() {
        let mut r = rng();
        let mut g = Graph::new();
        let x = g.constant(uniform_tensor(&[4, 3, 2, 2], 3.0, &mut r));
        let gamma = g.constant(Tensor::full(&[3], 1.0));
        let beta = g.constant(Tensor::zeros(&[3]));
        let (y, _) = batch_norm_train(&mut g, x, gamma, beta, 1);
        let yv = g.value(y);
        for c in 0..3 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|n| (0..4).map(move |i| (n, i)))
                .map(|(n, i)| yv.data()[(n * 3 + c) * 4 + i])
                .collect();
            let mean = vals.iter().sum::<f64>() / 16.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn layout_op_gradients() {
        let mut r = rng();
        let report = check_graph_gradients(
            &[uniform_tensor(&[2, 3, 2, 2], 1.0, &mut r), uniform_tensor(&[2, 2, 4, 4], 1.0, &mut r)],
            |g, v| {
                let up = upsample2(g, v[0]);
                let cat = concat(g, &[up, v[1]], 1);
                let rows = to_rows(g, cat);
                let s = slice_last(g, rows, 1, 3);
                sigmoid(g, s)
            },
            1e-4,
            60,
            &mut r,
        );
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn linear_and_embedding_gradients() {
        let mut r = rng();
        let report = check_graph_gradients(
            &[
                uniform_tensor(&[5, 3], 1.0, &mut r),
                uniform_tensor(&[4, 3], 1.0, &mut r),
                uniform_tensor(&[4], 1.0, &mut r),
            ],
            |g, v| {
                let e = embedding(g, v[0], &[1, 4, 4, 0], &[2, 2]);
                let y = linear(g, e, v[1], Some(v[2]));
                sigmoid(g, y)
            },
            1e-4,
            40,
            &mut r,
        );
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn single_affine_map_has_36_parameters() {
        // 8 inputs → 4 outputs with bias.
        let mut store = crate::nn::ParamStore::new();
        store.add("w", Tensor::zeros(&[4, 8]), crate::nn::ParamGroup::Head);
        store.add("b", Tensor::zeros(&[4]), crate::nn::ParamGroup::Head);
        assert_eq!(store.count_trainable(), 36);
    }

    #[test]
    fn bmm_and_scale_rows_gradients() {
        let mut r = rng();
        let a = uniform_tensor(&[2, 3, 4], 1.0, &mut r);
        let b = uniform_tensor(&[2, 4, 5], 1.0, &mut r);
        let bt = uniform_tensor(&[2, 5, 4], 1.0, &mut r);
        let rep = check_graph_gradients(&[a.clone(), b], |g, v| bmm(g, v[0], v[1], false), 1e-4, 100, &mut r);
        assert!(rep.passed, "{rep:?}");
        let rep = check_graph_gradients(&[a, bt], |g, v| bmm(g, v[0], v[1], true), 1e-4, 100, &mut r);
        assert!(rep.passed, "{rep:?}");
        let s = uniform_tensor(&[2, 3], 1.0, &mut r);
        let x = uniform_tensor(&[2, 3, 4], 1.0, &mut r);
        let rep = check_graph_gradients(&[s, x], |g, v| scale_rows(g, v[0], v[1]), 1e-4, 100, &mut r);
        assert!(rep.passed, "{rep:?}");
    }

    #[test]
    fn bmm_matches_naive_product() {
        let mut r = rng();
        let a = uniform_tensor(&[2, 3, 4], 1.0, &mut r);
        let b = uniform_tensor(&[2, 5, 4], 1.0, &mut r);
        let mut g = Graph::new();
        let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
        let y = bmm(&mut g, av, bv, true);
        for n in 0..2 {
            for i in 0..3 {
                for j in 0..5 {
                    let s: f64 = (0..4).map(|k| a.at(&[n, i, k]) * b.at(&[n, j, k])).sum();
                    assert!((g.value(y).at(&[n, i, j]) - s).abs() < 1e-12);
                }
            }
        }
    }
}
