//! SGD with heavy-ball momentum and L2 weight decay.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self { lr: 0.03, momentum: 0.9, weight_decay: 5e-4 }
    }
}

/// Momentum buffers are keyed by parameter index and created lazily.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub config: SgdConfig,
    velocity: Vec<Option<Tensor>>,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Self {
        Self { config, velocity: Vec::new() }
    }

    pub fn reset(&mut self) {
        self.velocity.clear();
    }

    /// `d = g + wd·θ; v = μ·v + d; θ ← θ − lr·v`. Parameters without a
    /// gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) {
        if self.velocity.len() < store.len() {
            self.velocity.resize(store.len(), None);
        }
        let SgdConfig { lr, momentum, weight_decay } = self.config;
        let ids: Vec<_> = store.trainable_ids().collect();
        for id in ids {
            let Some(g) = grads.get(id.index()).and_then(|g| g.as_ref()) else { continue };
            let theta = store.get_mut(id);
            match &mut self.velocity[id.index()] {
                Some(vel) => {
                    for ((t, gv), v) in theta.data_mut().iter_mut().zip(g.data()).zip(vel.data_mut()) {
                        *v = momentum * *v + gv + weight_decay * *t;
                        *t -= lr * *v;
                    }
                }
                slot => {
                    let mut vel = g.clone();
                    for (t, v) in theta.data_mut().iter_mut().zip(vel.data_mut()) {
                        *v += weight_decay * *t;
                        *t -= lr * *v;
                    }
                    if momentum > 0.0 {
                        *slot = Some(vel);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamKind;
    use alloc::vec;

    #[test]
    fn zero_lr_leaves_parameters() {
        let mut store = ParamStore::new();
        let id = store.add("w", ParamKind::Weight, Tensor::full(&[3], 0.5));
        let mut opt = Sgd::new(SgdConfig { lr: 0.0, ..SgdConfig::default() });
        opt.step(&mut store, &[Some(Tensor::full(&[3], 2.0))]);
        assert_eq!(store.get(id).data(), &[0.5; 3]);
    }

    #[test]
    fn momentum_matches_reference_recurrence() {
        let mut store = ParamStore::new();
        let id = store.add("w", ParamKind::Weight, Tensor::full(&[1], 1.0));
        let mut opt = Sgd::new(SgdConfig { lr: 0.1, momentum: 0.9, weight_decay: 0.0 });
        let g = vec![Some(Tensor::full(&[1], 1.0))];
        opt.step(&mut store, &g);
        assert!((store.get(id).item() - 0.9).abs() < 1e-15);
        opt.step(&mut store, &g);
        // v = 0.9·1 + 1 = 1.9
        assert!((store.get(id).item() - (0.9 - 0.19)).abs() < 1e-15);
    }
}
