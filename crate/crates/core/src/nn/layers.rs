//! Parameterized building blocks.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use super::ops;
use super::params::{BufferId, ParamGroup, ParamId, ParamStore};
use super::{BnUpdate, Ctx, Var};
use crate::tensor::Tensor;

pub fn uniform_init(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    if bound == 0.0 {
        return Tensor::zeros(shape);
    }
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Tensor::new(shape, (0..n).map(|_| dist.sample(rng)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Identity,
    Relu,
    Leaky(f64),
}

impl Activation {
    pub fn apply(self, ctx: &mut Ctx, x: Var) -> Var {
        match self {
            Activation::Identity => x,
            Activation::Relu => ops::relu(&mut ctx.graph, x),
            Activation::Leaky(s) => ops::leaky_relu(&mut ctx.graph, x, s),
        }
    }
}

/// Learnable affine normalization with running statistics.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
    /// Axis holding channels (1 for NCHW, last for rows).
    pub axis: usize,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, axis: usize, group: ParamGroup) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[channels], 1.0), group),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), group),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::full(&[channels], 1.0)),
            axis,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let gamma = ctx.param(self.gamma);
        let beta = ctx.param(self.beta);
        if ctx.train {
            let (y, stats) = ops::batch_norm_train(&mut ctx.graph, x, gamma, beta, self.axis);
            ctx.bn_updates.push(BnUpdate {
                mean: self.running_mean,
                var: self.running_var,
                batch_mean: stats.mean,
                batch_var: stats.var,
            });
            y
        } else {
            let mean = ctx.store.buffer(self.running_mean).data().to_vec();
            let var = ctx.store.buffer(self.running_var).data().to_vec();
            ops::batch_norm_eval(&mut ctx.graph, x, gamma, beta, self.axis, &mean, &var)
        }
    }
}

/// Exponential moving average of batch statistics into the running buffers.
pub fn apply_bn_updates(store: &mut ParamStore, updates: &[BnUpdate], momentum: f64) {
    for u in updates {
        for (r, b) in store.buffer_mut(u.mean).data_mut().iter_mut().zip(&u.batch_mean) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
        for (r, b) in store.buffer_mut(u.var).data_mut().iter_mut().zip(&u.batch_var) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
    }
}

/// Convolution → batch norm → activation.
#[derive(Debug, Clone)]
pub struct ConvBn {
    pub weight: ParamId,
    pub bn: BatchNorm,
    pub stride: usize,
    pub pad: usize,
    pub act: Activation,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        act: Activation,
        group: ParamGroup,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = c_in * kernel * kernel;
        let bound = (6.0 / fan_in as f64).sqrt();
        Self {
            weight: store.add(
                format!("{name}.weight"),
                uniform_init(&[c_out, c_in, kernel, kernel], bound, rng),
                group,
            ),
            bn: BatchNorm::new(store, &format!("{name}.bn"), c_out, 1, group),
            stride,
            pad: kernel / 2,
            act,
        }
    }

    /// Trainable scalars of a layer with these dimensions.
    pub fn param_count(c_in: usize, c_out: usize, kernel: usize) -> usize {
        c_out * c_in * kernel * kernel + 2 * c_out
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let w = ctx.param(self.weight);
        let y = ops::conv2d(&mut ctx.graph, x, w, self.stride, self.pad);
        let y = self.bn.forward(ctx, y);
        self.act.apply(ctx, y)
    }
}

/// Affine map over the last axis.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        group: ParamGroup,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform_init(&[fan_out, fan_in], bound, rng), group);
        let bias = bias.then(|| store.add(format!("{name}.bias"), uniform_init(&[fan_out], bound, rng), group));
        Self { weight, bias }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let w = ctx.param(self.weight);
        let b = self.bias.map(|b| ctx.param(b));
        ops::linear(&mut ctx.graph, x, w, b)
    }
}
