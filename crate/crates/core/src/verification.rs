//! Independent reference implementations used by the test suites:
//! finite-difference gradients, a brute-force query evaluator for the
//! synthetic grammar, and plain-loop geometry.
//!
//! None of these call into the code they check.

use rand::Rng;

use crate::data::SceneSpec;
use crate::error::{Error, Result};
use crate::geometry::{anchors_for, BBox, GridSpec, ANCHORS_PER_CELL};
use crate::nn::{Ctx, Graph, ParamId, ParamStore, Var};
use crate::tensor::Tensor;

pub const FD_EPS: f64 = 1e-4;
pub const DEFAULT_THRESHOLD: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub rel_errors: Vec<f64>,
    pub max_rel_error: f64,
    /// Probed coordinates left out because a `±eps` probe crossed the kink
    /// of a piecewise-linear op, where central differences are meaningless.
    pub skipped: usize,
    pub threshold: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn new(analytic: &[f64], numeric: &[f64], threshold: f64) -> Self {
        let rel_errors: Vec<f64> = analytic.iter().zip(numeric).map(|(&a, &n)| relative_error(a, n)).collect();
        let max_rel_error = rel_errors.iter().cloned().fold(0.0, f64::max);
        Self {
            passed: false,
            rel_errors,
            max_rel_error,
            skipped: 0,
            threshold,
        }
        .with_threshold(threshold)
    }

    /// Like [`GradCheckReport::new`], with `None` marking skipped probes.
    fn from_probes(analytic: &[f64], numeric: &[Option<f64>]) -> Self {
        let (a, n): (Vec<f64>, Vec<f64>) = analytic.iter().zip(numeric).filter_map(|(&a, n)| n.map(|n| (a, n))).unzip();
        let mut rep = Self::new(&a, &n, DEFAULT_THRESHOLD);
        rep.skipped = analytic.len() - a.len();
        rep
    }

    pub fn with_threshold(self, threshold: f64) -> Self {
        Self {
            passed: !self.rel_errors.is_empty()
                && self.max_rel_error < threshold
                && self.rel_errors.iter().all(|e| e.is_finite()),
            threshold,
            ..self
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Central differences of `f` at `theta` along each coordinate in `coords`.
pub fn finite_diff_grad(mut f: impl FnMut(&[f64]) -> f64, theta: &[f64], eps: f64, coords: &[usize]) -> Result<Vec<f64>> {
    let mut t = theta.to_vec();
    let mut out = Vec::with_capacity(coords.len());
    for &i in coords {
        if i >= t.len() {
            return Err(Error::IndexOutOfRange { index: i, len: t.len() });
        }
        let orig = t[i];
        t[i] = orig + eps;
        let plus = f(&t);
        t[i] = orig - eps;
        let minus = f(&t);
        t[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("objective not finite around coordinate {i}")));
        }
        out.push((plus - minus) / (2.0 * eps));
    }
    Ok(out)
}

pub fn uniform_tensor(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-bound..bound)).collect())
}

fn sample_coords(total: usize, samples: usize, rng: &mut impl Rng) -> Vec<usize> {
    if samples >= total {
        (0..total).collect()
    } else {
        rand::seq::index::sample(rng, total, samples).into_vec()
    }
}

/// Checks the backward pass of the graph built by `build` over `inputs`.
///
/// The output is contracted against a fixed random tensor `R`, so the
/// scalar being differentiated is `Σ R ⊙ build(inputs)`. At most `samples`
/// input coordinates are probed.
pub fn check_graph_gradients(
    inputs: &[Tensor],
    build: impl Fn(&mut Graph, &[Var]) -> Var,
    eps: f64,
    samples: usize,
    rng: &mut impl Rng,
) -> GradCheckReport {
    let run = |values: &[Tensor]| {
        let mut g = Graph::new();
        g.track_kinks();
        let vars: Vec<Var> = values.iter().map(|t| g.leaf(t.clone())).collect();
        let y = build(&mut g, &vars);
        (g, vars, y)
    };
    let (g, vars, y) = run(inputs);
    let seed = uniform_tensor(g.shape(y), 1.0, rng);
    let grads = g.backward_with(y, seed.clone());

    let sizes: Vec<usize> = inputs.iter().map(Tensor::numel).collect();
    let total: usize = sizes.iter().sum();
    let coords = sample_coords(total, samples, rng);
    let locate = |mut c: usize| {
        for (i, &s) in sizes.iter().enumerate() {
            if c < s {
                return (i, c);
            }
            c -= s;
        }
        unreachable!()
    };
    let analytic: Vec<f64> = coords
        .iter()
        .map(|&c| {
            let (i, j) = locate(c);
            grads.get(vars[i]).map_or(0.0, |t| t.data()[j])
        })
        .collect();

    let mut values = inputs.to_vec();
    let numeric: Vec<Option<f64>> = coords
        .iter()
        .map(|&c| {
            let (i, j) = locate(c);
            let orig = values[i].data()[j];
            let mut probe = |delta: f64| {
                values[i].data_mut()[j] = orig + delta;
                let (g, _, y) = run(&values);
                let f: f64 = g.value(y).data().iter().zip(seed.data()).map(|(a, b)| a * b).sum();
                (f, g.kinks().map(<[u64]>::to_vec))
            };
            let (plus, kp) = probe(eps);
            let (minus, km) = probe(-eps);
            values[i].data_mut()[j] = orig;
            central(plus, minus, eps, [kp, km], g.kinks())
        })
        .collect();
    GradCheckReport::from_probes(&analytic, &numeric)
}

/// Central difference, or `None` when the probes sit on different linear
/// pieces than the base point. Non-finite values pass through as NaN.
fn central(plus: f64, minus: f64, eps: f64, probes: [Option<Vec<u64>>; 2], base: Option<&[u64]>) -> Option<f64> {
    if probes.iter().any(|k| k.as_deref() != base) {
        return None;
    }
    let d = (plus - minus) / (2.0 * eps);
    Some(if d.is_finite() { d } else { f64::NAN })
}

/// Gradient check of a scalar objective with respect to stored parameters.
///
/// `build` records a forward pass in the given context and returns a scalar.
/// Probes `samples` random scalar entries drawn across all trainable params.
pub fn check_param_gradients(
    store: &ParamStore,
    build: impl Fn(&mut Ctx) -> Var,
    eps: f64,
    samples: usize,
    rng: &mut impl Rng,
) -> GradCheckReport {
    let ids: Vec<ParamId> = store.ids().filter(|&id| store.get(id).trainable).collect();
    let sizes: Vec<usize> = ids.iter().map(|&id| store.get(id).value.numel()).collect();
    let total: usize = sizes.iter().sum();
    let coords = sample_coords(total, samples, rng);
    let locate = |mut c: usize| {
        for (i, &s) in sizes.iter().enumerate() {
            if c < s {
                return (ids[i], c);
            }
            c -= s;
        }
        unreachable!()
    };

    let mut ctx = Ctx::new(store, true);
    ctx.graph.track_kinks();
    let loss = build(&mut ctx);
    let grads = ctx.graph.backward(loss);
    let mut param_grads = std::collections::HashMap::new();
    for (id, t) in grads.params() {
        param_grads.insert(id, t.clone());
    }
    let analytic: Vec<f64> = coords
        .iter()
        .map(|&c| {
            let (id, j) = locate(c);
            param_grads.get(&id).map_or(0.0, |t| t.data()[j])
        })
        .collect();

    let mut numeric = Vec::with_capacity(coords.len());
    let mut scratch = store.clone();
    for &c in &coords {
        let (id, j) = locate(c);
        let orig = scratch.get(id).value.data()[j];
        let eval = |delta: f64, s: &mut ParamStore| {
            s.get_mut(id).value.data_mut()[j] = orig + delta;
            let mut ctx = Ctx::new(s, true);
            ctx.graph.track_kinks();
            let l = build(&mut ctx);
            (ctx.value(l).item(), ctx.graph.kinks().map(<[u64]>::to_vec))
        };
        let (plus, kp) = eval(eps, &mut scratch);
        let (minus, km) = eval(-eps, &mut scratch);
        scratch.get_mut(id).value.data_mut()[j] = orig;
        numeric.push(central(plus, minus, eps, [kp, km], ctx.graph.kinks()));
    }
    GradCheckReport::from_probes(&analytic, &numeric)
}

/// Plain scan over every anchor placement of every grid. Returns the flat
/// index and IoU of the best placement; the first one wins ties.
pub fn exhaustive_anchor_scan(gt: &BBox, specs: &[GridSpec]) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    let mut index = 0;
    for spec in specs {
        let anchors = anchors_for(spec.k);
        let s = spec.stride as f64;
        for row in 0..spec.rows {
            for col in 0..spec.cols {
                for a in anchors.iter().take(ANCHORS_PER_CELL) {
                    let cx = (col as f64 + 0.5) * s;
                    let cy = (row as f64 + 0.5) * s;
                    let x0 = cx - a.pw / 2.0;
                    let y0 = cy - a.ph / 2.0;
                    let iw = ((x0 + a.pw).min(gt.x + gt.w) - x0.max(gt.x)).max(0.0);
                    let ih = ((y0 + a.ph).min(gt.y + gt.h) - y0.max(gt.y)).max(0.0);
                    let inter = iw * ih;
                    let union = gt.w * gt.h + a.pw * a.ph - inter;
                    let v = if union > 0.0 { inter / union } else { 0.0 };
                    if v > best.1 {
                        best = (index, v);
                    }
                    index += 1;
                }
            }
        }
    }
    best
}

/// Reference mask: cell `(r, c)` is set iff the pixel point at the middle
/// of the cell lies strictly inside `gt`.
pub fn pixel_center_mask(gt: &BBox, rows: usize, cols: usize, stride: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let px = c as f64 * stride as f64 + stride as f64 / 2.0;
            let py = r as f64 * stride as f64 + stride as f64 / 2.0;
            let inside = gt.w > 0.0 && gt.h > 0.0 && px > gt.x && px < gt.x + gt.w && py > gt.y && py < gt.y + gt.h;
            out.push(inside as u8);
        }
    }
    out
}

/// Per-cell binary cross-entropy, averaged.
pub fn bce_oracle(probs: &[f64], targets: &[f64]) -> f64 {
    let mut total = 0.0;
    for (&p, &y) in probs.iter().zip(targets) {
        total -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
    }
    total / probs.len() as f64
}

const ORDINALS: [&str; 4] = ["first", "second", "third", "fourth"];

/// Resolves `query` against `scene` by evaluating every object. Errors
/// unless exactly one object qualifies.
pub fn brute_force_referent(scene: &SceneSpec, query: &str) -> Result<usize> {
    let words: Vec<&str> = query.split_whitespace().collect();
    let bad = || Error::InvalidQuery(format!("not in the synthetic grammar: {query:?}"));
    let is = |i: usize, color: &str, shape: &str| {
        let o = &scene.shapes[i];
        o.color.name() == color && o.kind.name() == shape
    };
    let n = scene.shapes.len();
    let hits: Vec<usize> = match words.as_slice() {
        ["the", color, shape] => (0..n).filter(|&i| is(i, color, shape)).collect(),
        ["the", ordinal, shape, "from", "the", side] => {
            let rank = ORDINALS.iter().position(|o| o == ordinal).ok_or_else(bad)?;
            let mut same: Vec<usize> = (0..n).filter(|&i| scene.shapes[i].kind.name() == *shape).collect();
            match *side {
                "left" => same.sort_by(|&a, &b| scene.shapes[a].cx.total_cmp(&scene.shapes[b].cx)),
                "right" => same.sort_by(|&a, &b| scene.shapes[b].cx.total_cmp(&scene.shapes[a].cx)),
                _ => return Err(bad()),
            }
            // Equal x positions make the ordering ambiguous.
            let pick = same.get(rank).copied();
            match pick {
                Some(p) if same.iter().filter(|&&o| scene.shapes[o].cx == scene.shapes[p].cx).count() == 1 => vec![p],
                Some(p) => vec![p, p],
                None => vec![],
            }
        }
        ["the", c1, s1, rel @ .., "the", c2, s2] => {
            let test: fn(f64, f64, f64, f64) -> bool = match rel {
                ["left", "of"] => |ax, _, bx, _| ax < bx,
                ["right", "of"] => |ax, _, bx, _| ax > bx,
                ["above"] => |_, ay, _, by| ay < by,
                ["below"] => |_, ay, _, by| ay > by,
                _ => return Err(bad()),
            };
            (0..n)
                .filter(|&i| is(i, c1, s1))
                .filter(|&i| {
                    (0..n).any(|j| {
                        j != i && is(j, c2, s2) && {
                            let (a, b) = (&scene.shapes[i], &scene.shapes[j]);
                            test(a.cx, a.cy, b.cx, b.cy)
                        }
                    })
                })
                .collect()
        }
        _ => return Err(bad()),
    };
    match hits.as_slice() {
        [one] => Ok(*one),
        [] => Err(Error::InvalidQuery(format!("no object matches {query:?}"))),
        _ => Err(Error::InvalidQuery(format!("{query:?} is ambiguous"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn finite_differences_of_simple_functions() {
        let g = finite_diff_grad(|t| t[0] * t[0], &[3.0], FD_EPS, &[0]).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6);
        let g = finite_diff_grad(|_| 4.2, &[1.0, 2.0], FD_EPS, &[0, 1]).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-8));
        assert!(finite_diff_grad(|t| t[0].ln(), &[0.0], FD_EPS, &[0]).is_err());
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.001) - 0.001 / 1.001).abs() < 1e-15);
    }

    #[test]
    fn probes_across_a_relu_kink_are_skipped() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::new(&[3], vec![0.5, 3e-5, -0.7]);
        let rep = check_graph_gradients(&[x], |g, v| crate::nn::ops::relu(g, v[0]), FD_EPS, 3, &mut rng);
        assert_eq!((rep.skipped, rep.rel_errors.len()), (1, 2));
        assert!(rep.passed);

        let at_kink = Tensor::new(&[1], vec![0.0]);
        let rep = check_graph_gradients(&[at_kink], |g, v| crate::nn::ops::relu(g, v[0]), FD_EPS, 1, &mut rng);
        assert!(!rep.passed, "nothing left to compare");
    }

    #[test]
    fn anchor_scan_fixed_point() {
        let specs = GridSpec::pyramid(416).unwrap();
        // Largest anchor centered on cell (6, 6) of the 13×13 grid.
        let gt = BBox::from_center(6.5 * 32.0, 6.5 * 32.0, 373.0, 326.0);
        let (idx, v) = exhaustive_anchor_scan(&gt, &specs);
        assert_eq!(v, 1.0);
        assert_eq!(idx, (6 * 13 + 6) * 3 + 2);
    }

    #[test]
    fn bce_oracle_hand_case() {
        let v = bce_oracle(&[0.9, 0.1, 0.8, 0.2], &[1.0, 0.0, 1.0, 0.0]);
        assert!((v - 0.164252).abs() < 1e-6);
    }
}
