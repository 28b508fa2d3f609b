//! Adam with per-group learning rates and a polynomial decay schedule.

use super::params::{ParamGroup, ParamStore};
use crate::tensor::Tensor;

/// `lr(s) = base · (1 − s/S)^power`, clamped at zero past the last step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolyDecay {
    pub base_lr: f64,
    pub total_steps: usize,
    pub power: f64,
}

impl PolyDecay {
    pub fn linear(base_lr: f64, total_steps: usize) -> Self {
        Self {
            base_lr,
            total_steps,
            power: 1.0,
        }
    }

    pub fn lr(&self, step: usize) -> f64 {
        if self.total_steps == 0 {
            return 0.0;
        }
        let frac = 1.0 - (step.min(self.total_steps) as f64 / self.total_steps as f64);
        self.base_lr * frac.powf(self.power)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of updates applied so far.
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update using the gradients accumulated in `store`.
    pub fn step(&mut self, store: &mut ParamStore, lr: impl Fn(ParamGroup) -> f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, m), v) in store.params_mut().iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if !p.trainable {
                continue;
            }
            let rate = lr(p.group);
            let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
            let grad = p.grad.data();
            let value = p.value.data_mut();
            for (((x, &g), mi), vi) in value
                .iter_mut()
                .zip(grad)
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (1.0 - b1) * g;
                *vi = b2 * *vi + (1.0 - b2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *x -= rate * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints_are_exact() {
        let s = PolyDecay::linear(1e-4, 1000);
        assert_eq!(s.lr(0), 1e-4);
        assert_eq!(s.lr(1000), 0.0);
        assert_eq!(s.lr(250), 1e-4 * 0.75);
        assert_eq!(s.lr(5000), 0.0);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::new(&[2], vec![3.0, -2.0]), ParamGroup::Head);
        let mut adam = Adam::new(&store);
        for _ in 0..2000 {
            store.zero_grad();
            let x = store.get(id).value.data().to_vec();
            let g: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
            store.get_mut(id).grad = Tensor::new(&[2], g);
            adam.step(&mut store, |_| 0.01);
        }
        assert!(store.get(id).value.data().iter().all(|v| v.abs() < 1e-3));
    }

    #[test]
    fn first_adam_step_moves_by_learning_rate() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::new(&[1], vec![1.0]), ParamGroup::Backbone);
        store.get_mut(id).grad = Tensor::new(&[1], vec![0.5]);
        let mut adam = Adam::new(&store);
        adam.step(&mut store, |g| if g == ParamGroup::Backbone { 0.1 } else { 1.0 });
        assert!((store.get(id).value.data()[0] - 0.9).abs() < 1e-6);
    }
}
