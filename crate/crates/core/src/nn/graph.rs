use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Backward rule of a recorded operation.
pub trait Function: Send + Sync {
    fn inputs(&self) -> Vec<Var>;

    /// Gradients with respect to each of [`Function::inputs`], given the
    /// gradient of the output. `needs[i]` is false when input `i` does not
    /// lead to any differentiable leaf; implementations may return `None`
    /// for those.
    fn backward(&self, graph: &Graph, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>>;
}

enum Source {
    Constant,
    Leaf,
    Param,
    Op(Box<dyn Function>),
}

struct Node {
    value: Tensor,
    source: Source,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    kinks: Option<Vec<u64>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.add(value, Source::Constant, false)
    }

    /// A differentiable input that is not a stored parameter.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.add(value, Source::Leaf, true)
    }

    /// Records a parameter once per graph; later calls reuse the node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.add(p.value.clone(), Source::Param, p.trainable);
        self.params.insert(id, v);
        v
    }

    /// Starts recording, for every piecewise-linear op, which side of the
    /// kink each input element is on. Finite differences are only valid
    /// when both probes stay on the same linear piece.
    pub fn track_kinks(&mut self) {
        self.kinks = Some(Vec::new());
    }

    /// Packed sign bits noted so far, if tracking.
    pub fn kinks(&self) -> Option<&[u64]> {
        self.kinks.as_deref()
    }

    pub(crate) fn note_kinks(&mut self, v: Var) {
        let Some(bits) = &mut self.kinks else { return };
        for chunk in self.nodes[v.0].value.data().chunks(64) {
            bits.push(chunk.iter().enumerate().fold(0u64, |m, (i, &x)| m | ((x > 0.0) as u64) << i));
        }
    }

    pub fn push(&mut self, value: Tensor, f: impl Function + 'static) -> Var {
        let requires_grad = f.inputs().iter().any(|&v| self.requires_grad(v));
        self.add(value, Source::Op(Box::new(f)), requires_grad)
    }

    fn add(&mut self, value: Tensor, source: Source, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            source,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Back-propagates from `root`, seeding its gradient with ones.
    pub fn backward(&self, root: Var) -> Gradients {
        let seed = Tensor::full(self.value(root).shape(), 1.0);
        self.backward_with(root, seed)
    }

    pub fn backward_with(&self, root: Var, seed: Tensor) -> Gradients {
        assert_eq!(seed.shape(), self.value(root).shape());
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = None;
                continue;
            }
            let Source::Op(f) = &node.source else { continue };
            let Some(grad) = grads[idx].take() else { continue };
            let inputs = f.inputs();
            let needs: Vec<bool> = inputs.iter().map(|&v| self.requires_grad(v)).collect();
            let input_grads = f.backward(self, &grad, &needs);
            debug_assert_eq!(input_grads.len(), inputs.len());
            for ((v, g), need) in inputs.into_iter().zip(input_grads).zip(needs) {
                let (Some(g), true) = (g, need) else { continue };
                debug_assert_eq!(g.shape(), self.value(v).shape(), "gradient shape for node {}", v.0);
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
        }
        Gradients { grads, params: self.params.iter().map(|(&p, &v)| (p, v)).collect() }
    }
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of every parameter recorded on the graph.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params
            .iter()
            .filter_map(|&(p, v)| self.get(v).map(|g| (p, g)))
    }
}
