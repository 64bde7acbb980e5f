use std::collections::BTreeMap;

use crate::{Grads, ParamId, ParamStore, Scalar, Tensor};

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: BTreeMap<ParamId, (Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(weight_decay: f64) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, moments: BTreeMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update. `lr_of` gives the learning rate for each parameter;
    /// parameters that are not trainable or have no gradient are untouched.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Grads<T>, lr_of: impl Fn(ParamId) -> f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::from_f64c(self.beta1), T::from_f64c(self.beta2));
        let eps = T::from_f64c(self.eps);
        for (id, g) in grads.iter() {
            if !store.is_trainable(id) {
                continue;
            }
            let lr = lr_of(id);
            let (m, v) = self
                .moments
                .entry(id)
                .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            let step_size = T::from_f64c(lr / bc1);
            let denom_scale = T::from_f64c(1.0 / bc2.sqrt());
            let decay = T::from_f64c(1.0 - lr * self.weight_decay);
            let w = store.value_mut(id);
            for (((wi, mi), vi), &gi) in w
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                *wi = *wi * decay - step_size * *mi / (vi.sqrt() * denom_scale + eps);
            }
        }
    }
}
