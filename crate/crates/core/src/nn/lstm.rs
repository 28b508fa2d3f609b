//! One direction of a masked LSTM layer as a single fused operation.
//!
//! Gate order inside the `4L` blocks is input, forget, cell, output. Each
//! sample runs over its own true length only; outputs at padded positions
//! are zero and receive no gradient.

use super::graph::{Function, Graph, Var};
use super::ops::sigmoid_scalar;
use crate::exec;
use crate::tensor::{gemm, Tensor};

struct SampleCache {
    /// Activated gates per processed step, `len × 4L`, indexed by position.
    gates: Vec<f64>,
    /// Cell state per position, `len × L`.
    cells: Vec<f64>,
    /// Hidden state per position, `len × L`.
    hidden: Vec<f64>,
}

struct LstmDirection {
    x: Var,
    w_ih: Var,
    w_hh: Var,
    bias: Var,
    lengths: Vec<usize>,
    reverse: bool,
    caches: Vec<SampleCache>,
}

fn order(len: usize, reverse: bool) -> Vec<usize> {
    if reverse {
        (0..len).rev().collect()
    } else {
        (0..len).collect()
    }
}

/// Runs one LSTM direction over `x` (`N×T×E`). Returns `N×T×L`.
pub fn lstm_direction(
    g: &mut Graph,
    x: Var,
    w_ih: Var,
    w_hh: Var,
    bias: Var,
    lengths: &[usize],
    reverse: bool,
) -> Var {
    let xs = g.shape(x).to_vec();
    let (n, t_max, e) = (xs[0], xs[1], xs[2]);
    let l4 = g.shape(w_ih)[0];
    let l = l4 / 4;
    assert_eq!(g.shape(w_ih), &[l4, e]);
    assert_eq!(g.shape(w_hh), &[l4, l]);
    assert_eq!(lengths.len(), n);
    assert!(lengths.iter().all(|&len| len <= t_max));
    let xv = g.value(x).data();
    let wi = g.value(w_ih).data();
    let wh = g.value(w_hh).data();
    let bv = g.value(bias).data();

    let results = exec::map(n, |s| {
        let len = lengths[s];
        let xs = &xv[s * t_max * e..(s * t_max + len) * e];
        let mut pre = vec![0.0; len * l4];
        for row in pre.chunks_mut(l4) {
            row.copy_from_slice(bv);
        }
        gemm(len, e, l4, xs, false, wi, true, &mut pre, true);
        let mut gates = vec![0.0; len * l4];
        let mut cells = vec![0.0; len * l];
        let mut out = vec![0.0; t_max * l];
        let mut h = vec![0.0; l];
        let mut c = vec![0.0; l];
        let mut z = vec![0.0; l4];
        for t in order(len, reverse) {
            z.copy_from_slice(&pre[t * l4..(t + 1) * l4]);
            gemm(1, l, l4, &h, false, wh, true, &mut z, true);
            let gt = &mut gates[t * l4..(t + 1) * l4];
            for j in 0..l {
                let i_g = sigmoid_scalar(z[j]);
                let f_g = sigmoid_scalar(z[l + j]);
                let c_g = z[2 * l + j].tanh();
                let o_g = sigmoid_scalar(z[3 * l + j]);
                c[j] = f_g * c[j] + i_g * c_g;
                h[j] = o_g * c[j].tanh();
                gt[j] = i_g;
                gt[l + j] = f_g;
                gt[2 * l + j] = c_g;
                gt[3 * l + j] = o_g;
            }
            cells[t * l..(t + 1) * l].copy_from_slice(&c);
            out[t * l..(t + 1) * l].copy_from_slice(&h);
        }
        let hidden = out[..len * l].to_vec();
        (out, SampleCache { gates, cells, hidden })
    });

    let mut out = Vec::with_capacity(n * t_max * l);
    let mut caches = Vec::with_capacity(n);
    for (o, cache) in results {
        out.extend(o);
        caches.push(cache);
    }
    let op = LstmDirection {
        x,
        w_ih,
        w_hh,
        bias,
        lengths: lengths.to_vec(),
        reverse,
        caches,
    };
    g.push(Tensor::new(&[n, t_max, l], out), op)
}

impl Function for LstmDirection {
    fn inputs(&self) -> Vec<Var> {
        vec![self.x, self.w_ih, self.w_hh, self.bias]
    }

    fn backward(&self, g: &Graph, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let xs = g.shape(self.x);
        let (n, t_max, e) = (xs[0], xs[1], xs[2]);
        let l4 = g.shape(self.w_ih)[0];
        let l = l4 / 4;
        let xv = g.value(self.x).data();
        let wi = g.value(self.w_ih).data();
        let wh = g.value(self.w_hh).data();
        let dy = grad.data();

        let parts = exec::map(n, |s| {
            let len = self.lengths[s];
            let cache = &self.caches[s];
            let hs = &cache.hidden;
            let dys = &dy[s * t_max * l..(s * t_max + len) * l];
            let mut dgates = vec![0.0; len * l4];
            let mut dw_hh = vec![0.0; l4 * l];
            let mut dh_next = vec![0.0; l];
            let mut dc_next = vec![0.0; l];
            let steps = order(len, self.reverse);
            for (k, &t) in steps.iter().enumerate().rev() {
                let prev = (k > 0).then(|| steps[k - 1]);
                let gt = &cache.gates[t * l4..(t + 1) * l4];
                let ct = &cache.cells[t * l..(t + 1) * l];
                let dz = &mut dgates[t * l4..(t + 1) * l4];
                for j in 0..l {
                    let (i_g, f_g, c_g, o_g) = (gt[j], gt[l + j], gt[2 * l + j], gt[3 * l + j]);
                    let c_prev = prev.map_or(0.0, |p| cache.cells[p * l + j]);
                    let tc = ct[j].tanh();
                    let dh = dys[t * l + j] + dh_next[j];
                    let dc = dh * o_g * (1.0 - tc * tc) + dc_next[j];
                    dz[j] = dc * c_g * i_g * (1.0 - i_g);
                    dz[l + j] = dc * c_prev * f_g * (1.0 - f_g);
                    dz[2 * l + j] = dc * i_g * (1.0 - c_g * c_g);
                    dz[3 * l + j] = dh * tc * o_g * (1.0 - o_g);
                    dc_next[j] = dc * f_g;
                }
                // dh_{prev} = dz · W_hh ; dW_hh += dzᵀ ⊗ h_prev
                gemm(1, l4, l, dz, false, wh, false, &mut dh_next, false);
                if let Some(p) = prev {
                    gemm(l4, 1, l, dz, false, &hs[p * l..(p + 1) * l], false, &mut dw_hh, true);
                }
            }
            let xs = &xv[s * t_max * e..(s * t_max + len) * e];
            let mut dw_ih = vec![0.0; l4 * e];
            gemm(l4, len, e, &dgates, true, xs, false, &mut dw_ih, false);
            let mut db = vec![0.0; l4];
            for row in dgates.chunks(l4) {
                for (a, b) in db.iter_mut().zip(row) {
                    *a += b;
                }
            }
            let mut dx = vec![0.0; t_max * e];
            if needs[0] {
                gemm(len, l4, e, &dgates, false, wi, false, &mut dx[..len * e], false);
            }
            (dx, dw_ih, dw_hh, db)
        });

        let mut dx = Vec::with_capacity(n * t_max * e);
        let mut dw_ih = vec![0.0; l4 * e];
        let mut dw_hh = vec![0.0; l4 * l];
        let mut db = vec![0.0; l4];
        for (x, wi_p, wh_p, b_p) in parts {
            dx.extend(x);
            dw_ih.iter_mut().zip(wi_p).for_each(|(a, b)| *a += b);
            dw_hh.iter_mut().zip(wh_p).for_each(|(a, b)| *a += b);
            db.iter_mut().zip(b_p).for_each(|(a, b)| *a += b);
        }
        vec![
            needs[0].then(|| Tensor::new(xs, dx)),
            Some(Tensor::new(&[l4, e], dw_ih)),
            Some(Tensor::new(&[l4, l], dw_hh)),
            Some(Tensor::new(&[l4], db)),
        ]
    }
}
