//! Adam with bias correction and a step-decay learning-rate schedule.

use crate::autodiff::ParameterStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step_count: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParameterStore) -> Self {
        let zeros = || store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update of every trainable parameter from its accumulated
    /// gradient.
    pub fn step(&mut self, store: &mut ParameterStore, lr: f64) {
        self.step_count += 1;
        let t = self.step_count as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for ((_, p), (m, v)) in store.iter_mut().zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            if !p.kind.trainable() {
                continue;
            }
            let grad = p.grad.data();
            let value = p.value.data_mut();
            for (((w, g), m), v) in value
                .iter_mut()
                .zip(grad)
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// `base · decay^⌊epoch / every⌋`.
pub fn lr_at(epoch: usize, base: f64, decay: f64, every: usize) -> f64 {
    if every == 0 {
        return base;
    }
    base * decay.powi((epoch / every) as i32)
}
