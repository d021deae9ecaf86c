//! Adam and the step learning-rate schedule.

use std::collections::BTreeMap;

use drrnet_tensor::nn::ParamStore;
use drrnet_tensor::{Gradients, Scalar, Tensor};

/// Adam without weight decay. Moments are keyed by parameter name so they
/// survive a checkpoint round trip.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Completed steps.
    pub t: u64,
    pub moments: BTreeMap<String, (Tensor<T>, Tensor<T>)>,
}

impl<T> Default for Adam<T> {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, moments: BTreeMap::new() }
    }
}

impl<T: Scalar> Adam<T> {
    /// One update of every trainable parameter that received a gradient.
    pub fn step(&mut self, store: &ParamStore<T>, grads: &Gradients<T>, lr: f64) {
        self.t += 1;
        let (b1, b2) = (T::cast_f64(self.beta1), T::cast_f64(self.beta2));
        let (one, eps) = (T::one(), T::cast_f64(self.eps));
        let c1 = T::cast_f64(1.0 - self.beta1.powi(self.t as i32));
        let c2 = T::cast_f64(1.0 - self.beta2.powi(self.t as i32));
        let lr = T::cast_f64(lr);
        for p in store.trainable() {
            let Some(g) = grads.param(p.id()) else { continue };
            let (m, v) = self
                .moments
                .entry(p.name().to_string())
                .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            p.update(|w| {
                let (wd, md, vd) = (w.data_mut(), m.data_mut(), v.data_mut());
                for (i, &gi) in g.data().iter().enumerate() {
                    md[i] = b1 * md[i] + (one - b1) * gi;
                    vd[i] = b2 * vd[i] + (one - b2) * gi * gi;
                    let mh = md[i] / c1;
                    let vh = vd[i] / c2;
                    wd[i] -= lr * mh / (vh.sqrt() + eps);
                }
            });
        }
    }
}

/// Learning rate at 1-based `epoch`: `lr * decay^((epoch - 1) / step)`.
pub fn step_lr(lr: f64, decay: f64, step: usize, epoch: usize) -> f64 {
    lr * decay.powi((epoch.saturating_sub(1) / step.max(1)) as i32)
}

/// L2 norm over every gradient of a trainable parameter.
pub fn grad_norm<T: Scalar>(store: &ParamStore<T>, grads: &Gradients<T>) -> f64 {
    store
        .trainable()
        .filter_map(|p| grads.param(p.id()))
        .flat_map(|g| g.data().iter().map(|v| v.as_f64() * v.as_f64()))
        .sum::<f64>()
        .sqrt()
}
