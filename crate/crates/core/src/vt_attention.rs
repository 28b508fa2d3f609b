//! Cross-modal attention between grid cells and query words.
//!
//! For one resolution with projected grid `G` (`HW × D`) and word features
//! `Q′` (`n × D`):
//!
//! * `M = G · Q′ᵀ` scores every cell against every word,
//! * `α` is the row-wise softmax of `M`, and `T′ = α · Q′` gives each cell
//!   its own text vector,
//! * `β = σ(Σ_j M_ij)` is the attention map and `V = β ⊙ G` the attended
//!   visual features.
//!
//! The free functions work on a single unpadded sample. [`diff`] holds the
//! batched, differentiable versions, which mask padded words.

use crate::error::{Error, Result};
use crate::geometry::{sigmoid, GridSpec};
use crate::tensor::{gemm, Tensor};

/// Softmax over `row[..valid]`; entries past `valid` are set to zero.
fn masked_softmax_into(row: &[f64], valid: usize, out: &mut [f64]) {
    let max = row[..valid].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out[..valid].iter_mut().zip(row) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in &mut out[..valid] {
        *o /= sum;
    }
    out[valid..].iter_mut().for_each(|o| *o = 0.0);
}

fn check_2d(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [a, b] => Ok((*a, *b)),
        s => Err(Error::Shape(format!("{what} must be 2-D, got {s:?}"))),
    }
}

/// `M[i][j] = ⟨g_i, q_j⟩`.
pub fn match_matrix(grid: &Tensor, words: &Tensor) -> Result<Tensor> {
    let (hw, d) = check_2d(grid, "grid")?;
    let (n, dq) = check_2d(words, "word features")?;
    if d != dq {
        return Err(Error::Shape(format!("grid has D = {d}, words have D = {dq}")));
    }
    let mut out = vec![0.0; hw * n];
    gemm(hw, d, n, grid.data(), false, words.data(), true, &mut out, false);
    Ok(Tensor::new(&[hw, n], out))
}

/// Row-wise softmax of `M`.
pub fn word_attention(m: &Tensor) -> Result<Tensor> {
    let (_, n) = check_2d(m, "matching matrix")?;
    let mut out = vec![0.0; m.numel()];
    for (r, o) in m.data().chunks(n).zip(out.chunks_mut(n)) {
        masked_softmax_into(r, n, o);
    }
    Ok(Tensor::new(m.shape(), out))
}

/// `T′ = α · Q′`.
pub fn text_feature_matrix(alpha: &Tensor, words: &Tensor) -> Result<Tensor> {
    let (hw, n) = check_2d(alpha, "word attention")?;
    let (nq, d) = check_2d(words, "word features")?;
    if n != nq {
        return Err(Error::Shape(format!("attention over {n} words, {nq} word vectors given")));
    }
    let mut out = vec![0.0; hw * d];
    gemm(hw, n, d, alpha.data(), false, words.data(), false, &mut out, false);
    Ok(Tensor::new(&[hw, d], out))
}

/// `β = σ(Σ_j M_ij)`, returned as `rows × cols`.
pub fn attention_map(m: &Tensor, spec: &GridSpec) -> Result<Tensor> {
    let (hw, n) = check_2d(m, "matching matrix")?;
    if hw != spec.cells() {
        return Err(Error::Shape(format!("{hw} rows for a {}×{} grid", spec.rows, spec.cols)));
    }
    let beta = m.data().chunks(n).map(|r| sigmoid(r.iter().sum())).collect();
    Ok(Tensor::new(&[spec.rows, spec.cols], beta))
}

/// `V = β ⊙ G`: row `i` of `grid` scaled by the `i`-th entry of `beta`
/// (row-major).
pub fn attend_visual(beta: &Tensor, grid: &Tensor) -> Result<Tensor> {
    let (hw, d) = check_2d(grid, "grid")?;
    if beta.numel() != hw {
        return Err(Error::Shape(format!("attention map has {} cells, grid has {hw}", beta.numel())));
    }
    let b = beta.data();
    let out = grid.data().iter().enumerate().map(|(i, v)| v * b[i / d]).collect();
    Ok(Tensor::new(&[hw, d], out))
}

/// Every intermediate of the attention block at one resolution.
#[derive(Debug, Clone)]
pub struct CrossModalState {
    pub matching: Tensor,
    pub alpha: Tensor,
    pub text: Tensor,
    pub beta: Tensor,
    pub attended: Tensor,
}

impl CrossModalState {
    pub fn compute(grid: &Tensor, words: &Tensor, spec: &GridSpec) -> Result<Self> {
        let matching = match_matrix(grid, words)?;
        let alpha = word_attention(&matching)?;
        let text = text_feature_matrix(&alpha, words)?;
        let beta = attention_map(&matching, spec)?;
        let attended = attend_visual(&beta, grid)?;
        Ok(Self {
            matching,
            alpha,
            text,
            beta,
            attended,
        })
    }
}

/// Batched differentiable versions. Grids are `N × HW × D`, word features
/// `N × T × D` padded to the longest query; `lengths` holds true lengths.
pub mod diff {
    use super::masked_softmax_into;
    use crate::exec;
    use crate::nn::ops::{self, sigmoid};
    use crate::nn::{Function, Graph, Var};
    use crate::tensor::Tensor;

    pub fn match_matrix(g: &mut Graph, grid: Var, words: Var) -> Var {
        ops::bmm(g, grid, words, true)
    }

    pub fn text_feature_matrix(g: &mut Graph, alpha: Var, words: Var) -> Var {
        ops::bmm(g, alpha, words, false)
    }

    pub fn attend_visual(g: &mut Graph, beta: Var, grid: Var) -> Var {
        ops::scale_rows(g, beta, grid)
    }

    struct MaskedSoftmax {
        m: Var,
        lengths: Vec<usize>,
    }

    /// Softmax of each `M` row over the sample's true words; padded
    /// columns get weight 0.
    pub fn word_attention(g: &mut Graph, m: Var, lengths: &[usize]) -> Var {
        let s = g.shape(m).to_vec();
        let (hw, t) = (s[1], s[2]);
        assert_eq!(lengths.len(), s[0]);
        let mut out = vec![0.0; g.value(m).numel()];
        let mv = g.value(m).data();
        exec::for_each_chunk(&mut out, hw * t, |n, o| {
            for (src, dst) in mv[n * hw * t..(n + 1) * hw * t].chunks(t).zip(o.chunks_mut(t)) {
                masked_softmax_into(src, lengths[n], dst);
            }
        });
        let value = Tensor::new(&s, out);
        g.push(value, MaskedSoftmax { m, lengths: lengths.to_vec() })
    }

    impl Function for MaskedSoftmax {
        fn inputs(&self) -> Vec<Var> {
            vec![self.m]
        }

        fn backward(&self, g: &Graph, grad: &Tensor, _needs: &[bool]) -> Vec<Option<Tensor>> {
            // The node's own output is not stored on the function, so recompute α.
            let s = g.shape(self.m);
            let (hw, t) = (s[1], s[2]);
            let mv = g.value(self.m).data();
            let dy = grad.data();
            let mut dm = vec![0.0; mv.len()];
            let mut alpha = vec![0.0; t];
            for (n, &len) in self.lengths.iter().enumerate() {
                for r in 0..hw {
                    let off = (n * hw + r) * t;
                    masked_softmax_into(&mv[off..off + t], len, &mut alpha);
                    let dot: f64 = (0..len).map(|j| alpha[j] * dy[off + j]).sum();
                    for j in 0..len {
                        dm[off + j] = alpha[j] * (dy[off + j] - dot);
                    }
                }
            }
            vec![Some(Tensor::new(s, dm))]
        }
    }

    struct MaskedRowSum {
        m: Var,
        lengths: Vec<usize>,
    }

    /// `s[n, i] = Σ_{j < len_n} M[n, i, j]`: the pre-sigmoid attention map.
    pub fn attention_logits(g: &mut Graph, m: Var, lengths: &[usize]) -> Var {
        let s = g.shape(m).to_vec();
        let (n, hw, t) = (s[0], s[1], s[2]);
        let mv = g.value(m).data();
        let mut out = Vec::with_capacity(n * hw);
        for (b, &len) in lengths.iter().enumerate() {
            for r in 0..hw {
                let off = (b * hw + r) * t;
                out.push(mv[off..off + len].iter().sum());
            }
        }
        g.push(Tensor::new(&[n, hw], out), MaskedRowSum { m, lengths: lengths.to_vec() })
    }

    impl Function for MaskedRowSum {
        fn inputs(&self) -> Vec<Var> {
            vec![self.m]
        }

        fn backward(&self, g: &Graph, grad: &Tensor, _needs: &[bool]) -> Vec<Option<Tensor>> {
            let s = g.shape(self.m);
            let (hw, t) = (s[1], s[2]);
            let mut dm = vec![0.0; s.iter().product()];
            for (b, &len) in self.lengths.iter().enumerate() {
                for r in 0..hw {
                    let d = grad.data()[b * hw + r];
                    let off = (b * hw + r) * t;
                    dm[off..off + len].iter_mut().for_each(|v| *v = d);
                }
            }
            vec![Some(Tensor::new(s, dm))]
        }
    }

    /// Output of the attention block for one resolution.
    #[derive(Debug, Clone, Copy)]
    pub struct Attended {
        pub matching: Var,
        pub alpha: Var,
        pub text: Var,
        /// Pre-sigmoid attention map `N × HW`.
        pub logits: Var,
        pub beta: Var,
        pub attended: Var,
    }

    pub fn attend(g: &mut Graph, grid: Var, words: Var, lengths: &[usize]) -> Attended {
        let matching = match_matrix(g, grid, words);
        let alpha = word_attention(g, matching, lengths);
        let text = text_feature_matrix(g, alpha, words);
        let logits = attention_logits(g, matching, lengths);
        let beta = sigmoid(g, logits);
        let attended = attend_visual(g, beta, grid);
        Attended {
            matching,
            alpha,
            text,
            logits,
            beta,
            attended,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::verification::{check_graph_gradients, uniform_tensor};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t2(rows: &[&[f64]]) -> Tensor {
        let c = rows[0].len();
        Tensor::new(&[rows.len(), c], rows.iter().flat_map(|r| r.iter().copied()).collect())
    }

    #[test]
    fn match_matrix_hand_case() {
        let g = t2(&[&[1.0, 0.0], &[0.0, 2.0]]);
        let q = t2(&[&[1.0, 1.0], &[2.0, 0.0]]);
        assert_eq!(match_matrix(&g, &q).unwrap().data(), &[1.0, 2.0, 2.0, 0.0]);
        let bad = t2(&[&[1.0, 1.0, 1.0]]);
        assert!(matches!(match_matrix(&g, &bad), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_edge_rows() {
        let a = word_attention(&t2(&[&[0.0, 0.0], &[1000.0, 1000.0], &[3.0, 3.0]])).unwrap();
        assert!(a.data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn text_features_select_and_average() {
        let q = t2(&[&[1.0, 4.0], &[3.0, -2.0]]);
        let alpha = t2(&[&[0.5, 0.5], &[0.0, 1.0]]);
        let t = text_feature_matrix(&alpha, &q).unwrap();
        assert_eq!(t.data(), &[2.0, 1.0, 3.0, -2.0]);
    }

    #[test]
    fn attention_map_values() {
        let spec = GridSpec { rows: 1, cols: 3, stride: 8, k: 2 };
        let b = attention_map(&t2(&[&[0.0, 0.0], &[10.0, 10.0], &[1.0, 2.0]]), &spec).unwrap();
        assert_eq!(b.shape(), &[1, 3]);
        assert_eq!(b.data()[0], 0.5);
        assert!(b.data()[1] > 0.9999);
        assert!((b.data()[2] - 0.952574).abs() < 1e-6);
    }

    #[test]
    fn attended_rows_scale_norms() {
        let g = t2(&[&[3.0, 4.0], &[1.0, 0.0]]);
        let beta = Tensor::new(&[2], vec![0.25, 1e-9]);
        let v = attend_visual(&beta, &g).unwrap();
        let norm = (v.at(&[0, 0]).powi(2) + v.at(&[0, 1]).powi(2)).sqrt();
        assert!((norm - 0.25 * 5.0).abs() < 1e-15);
        assert!(v.at(&[1, 0]) < 1e-8);
    }

    #[test]
    fn masked_batch_matches_unpadded_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let spec = GridSpec { rows: 2, cols: 2, stride: 8, k: 2 };
        let grid = uniform_tensor(&[2, 4, 3], 1.0, &mut rng);
        let words = uniform_tensor(&[2, 5, 3], 1.0, &mut rng);
        let mut g = crate::nn::Graph::new();
        let (gv, wv) = (g.constant(grid.clone()), g.constant(words.clone()));
        let out = diff::attend(&mut g, gv, wv, &[2, 5]);
        // Sample 0 only has two words.
        let g0 = Tensor::new(&[4, 3], grid.data()[..12].to_vec());
        let w0 = Tensor::new(&[2, 3], words.data()[..6].to_vec());
        let st = CrossModalState::compute(&g0, &w0, &spec).unwrap();
        let alpha = g.value(out.alpha);
        for i in 0..4 {
            for j in 0..5 {
                let want = if j < 2 { st.alpha.at(&[i, j]) } else { 0.0 };
                assert!((alpha.at(&[0, i, j]) - want).abs() < 1e-15);
            }
            assert!((g.value(out.beta).at(&[0, i]) - st.beta.data()[i]).abs() < 1e-15);
            for d in 0..3 {
                assert!((g.value(out.text).at(&[0, i, d]) - st.text.at(&[i, d])).abs() < 1e-15);
                assert!((g.value(out.attended).at(&[0, i, d]) - st.attended.at(&[i, d])).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn attention_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let grid = uniform_tensor(&[2, 16, 8], 0.5, &mut rng);
        let words = uniform_tensor(&[2, 3, 8], 0.5, &mut rng);
        let rep = check_graph_gradients(
            &[grid, words],
            |g, v| {
                let a = diff::attend(g, v[0], v[1], &[3, 2]);
                ops_concat(g, a.text, a.attended)
            },
            1e-4,
            200,
            &mut rng,
        );
        assert!(rep.passed, "{rep:?}");
    }

    fn ops_concat(g: &mut crate::nn::Graph, a: crate::nn::Var, b: crate::nn::Var) -> crate::nn::Var {
        crate::nn::ops::concat(g, &[a, b], 2)
    }

    proptest! {
        #[test]
        fn rows_are_stochastic_and_shift_invariant(
            vals in proptest::collection::vec(-30.0f64..30.0, 12),
            shift in -50.0f64..50.0,
        ) {
            let m = Tensor::new(&[4, 3], vals.clone());
            let a = word_attention(&m).unwrap();
            let shifted = Tensor::new(&[4, 3], vals.iter().map(|v| v + shift).collect());
            let b = word_attention(&shifted).unwrap();
            for r in 0..4 {
                let s: f64 = (0..3).map(|j| a.at(&[r, j])).sum();
                prop_assert!((s - 1.0).abs() < 1e-6);
            }
            prop_assert!(a.max_abs_diff(&b) < 1e-6);
        }

        #[test]
        fn text_rows_stay_in_word_hull(
            m in proptest::collection::vec(-5.0f64..5.0, 8),
            q in proptest::collection::vec(-3.0f64..3.0, 6),
        ) {
            let alpha = word_attention(&Tensor::new(&[4, 2], m)).unwrap();
            let words = Tensor::new(&[2, 3], q);
            let t = text_feature_matrix(&alpha, &words).unwrap();
            for i in 0..4 {
                for d in 0..3 {
                    let (lo, hi) = (words.at(&[0, d]).min(words.at(&[1, d])), words.at(&[0, d]).max(words.at(&[1, d])));
                    prop_assert!(t.at(&[i, d]) >= lo - 1e-12 && t.at(&[i, d]) <= hi + 1e-12);
                }
            }
        }

        #[test]
        fn beta_is_monotone_per_entry(
            vals in proptest::collection::vec(-3.0f64..3.0, 6),
            cell in 0usize..3,
            word in 0usize..2,
            bump in 1e-3f64..2.0,
        ) {
            let spec = GridSpec { rows: 1, cols: 3, stride: 8, k: 2 };
            let m = Tensor::new(&[3, 2], vals);
            let mut m2 = m.clone();
            m2.set(&[cell, word], m.at(&[cell, word]) + bump);
            let (a, b) = (attention_map(&m, &spec).unwrap(), attention_map(&m2, &spec).unwrap());
            prop_assert!(b.data()[cell] > a.data()[cell]);
            prop_assert!(a.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }
}
