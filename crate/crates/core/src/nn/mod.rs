//! Reverse-mode automatic differentiation over [`Tensor`]s, plus the layers
//! and optimizer the grounding model is built from.
//!
//! A forward pass records every operation on a [`Graph`]. Each operation
//! owns a [`Function`] that knows how to map the gradient of its output onto
//! gradients of its inputs; [`Graph::backward`] walks the record in reverse.

mod graph;
pub mod layers;
pub mod lstm;
pub mod ops;
pub mod optim;
mod params;

pub use graph::{Function, Gradients, Graph, Var};
pub use params::{BufferId, ParamGroup, ParamId, ParamStore};

use crate::tensor::Tensor;

/// Running-statistic update produced by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BnUpdate {
    pub mean: BufferId,
    pub var: BufferId,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
}

/// Forward-pass context: the tape being recorded, a read-only parameter
/// snapshot, and the train/eval switch.
pub struct Ctx<'a> {
    pub graph: Graph,
    pub store: &'a ParamStore,
    pub train: bool,
    pub bn_updates: Vec<BnUpdate>,
}

impl<'a> Ctx<'a> {
    pub fn new(store: &'a ParamStore, train: bool) -> Self {
        Self {
            graph: Graph::new(),
            store,
            train,
            bn_updates: Vec::new(),
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.graph.param(self.store, id)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.graph.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.graph.value(v)
    }
}
