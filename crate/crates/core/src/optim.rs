//! SGD with momentum and decoupled-from-BN weight decay.

use serde::{Deserialize, Serialize};

use crate::params::ParamStore;

pub const MOMENTUM: f32 = 0.9;
pub const WEIGHT_DECAY: f32 = 3e-5;

/// Momentum SGD with the usual deep-learning conventions: parameters without
/// a gradient are skipped, weight decay is added to the gradient of decaying
/// parameters only, and the first step initializes the momentum buffer with
/// the raw gradient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub momentum: f32,
    pub weight_decay: f32,
    /// Momentum buffer per parameter, indexed like the store.
    pub buffers: Vec<Option<Vec<f32>>>,
    pub steps: u64,
}

impl Default for Sgd {
    fn default() -> Self {
        Self::new(MOMENTUM, WEIGHT_DECAY)
    }
}

impl Sgd {
    pub fn new(momentum: f32, weight_decay: f32) -> Self {
        Self {
            momentum,
            weight_decay,
            buffers: Vec::new(),
            steps: 0,
        }
    }

    /// One update with learning rate `lr`; gradients are left in place.
    pub fn step(&mut self, store: &mut ParamStore, lr: f32) {
        if self.buffers.len() < store.len() {
            self.buffers.resize(store.len(), None);
        }
        for (id, p) in store.iter_mut() {
            if !p.kind.trainable() {
                continue;
            }
            let decay = if p.kind.decays() { self.weight_decay } else { 0.0 };
            let Some(grad) = p.tensor.grad().map(|g| g.to_vec()) else {
                continue;
            };
            let w = p.tensor.data_mut();
            let d: Vec<f32> = grad.iter().zip(w.iter()).map(|(g, w)| g + decay * w).collect();
            let buf = match &mut self.buffers[id.0] {
                Some(b) => {
                    b.iter_mut().zip(&d).for_each(|(b, d)| *b = self.momentum * *b + d);
                    b
                }
                slot @ None => slot.insert(d),
            };
            w.iter_mut().zip(buf.iter()).for_each(|(w, b)| *w -= lr * b);
        }
        self.steps += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamKind;
    use crate::tensor::Tensor;

    #[test]
    fn momentum_and_decay_follow_closed_form() {
        let mut store = ParamStore::new();
        let w = store.insert("w", ParamKind::Weight, Tensor::full(&[1], 1.0)).unwrap();
        let b = store.insert("b", ParamKind::Bias, Tensor::full(&[1], 1.0)).unwrap();
        let mut opt = Sgd::new(0.9, 0.1);
        for _ in 0..2 {
            store.zero_grad();
            store.get_mut(w).tensor.accumulate_grad(&[0.5]);
            store.get_mut(b).tensor.accumulate_grad(&[0.5]);
            opt.step(&mut store, 0.1);
        }
        // step 1: d = 0.5 + 0.1*1 = 0.6, buf = 0.6, w = 0.94
        // step 2: d = 0.5 + 0.094 = 0.594, buf = 0.54 + 0.594 = 1.134, w = 0.8266
        let wv = store.get(w).tensor.data()[0];
        assert!((wv - 0.8266).abs() < 1e-6, "{wv}");
        // bias: no decay; buf 0.5 then 0.95; b = 1 - 0.05 - 0.095
        let bv = store.get(b).tensor.data()[0];
        assert!((bv - 0.855).abs() < 1e-6, "{bv}");
    }

    #[test]
    fn parameters_without_gradient_are_untouched() {
        let mut store = ParamStore::new();
        let w = store.insert("w", ParamKind::Weight, Tensor::full(&[2], 1.0)).unwrap();
        let mut opt = Sgd::default();
        opt.step(&mut store, 1.0);
        assert_eq!(store.get(w).tensor.data(), &[1.0, 1.0]);
        assert!(opt.buffers[0].is_none());
    }
}
