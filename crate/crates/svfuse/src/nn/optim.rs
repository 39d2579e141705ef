//! Gradient descent over named parameters.

use std::collections::BTreeMap;

use super::params::{BoundParams, ParamSet};
use super::tape::Gradients;

/// Plain SGD with optional momentum. Updates iterate names in sorted order,
/// keeping runs bit-identical.
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        assert!(lr >= 0.0, "learning rate must be non-negative");
        Self {
            lr,
            momentum,
            velocity: BTreeMap::new(),
        }
    }

    /// Applies p <- p - lr * g (with momentum folded into g when enabled) to
    /// every trainable parameter that received a gradient. Returns the max
    /// absolute gradient seen, a cheap divergence signal.
    pub fn step(
        &mut self,
        params: &mut ParamSet,
        bound: &BoundParams,
        grads: &Gradients,
    ) -> f64 {
        let mut max_grad: f64 = 0.0;
        let names: Vec<String> = params
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(n, _)| n.clone())
            .collect();
        for name in names {
            let Some(grad) = grads.get(bound.var(&name)) else {
                continue;
            };
            for &g in grad {
                max_grad = max_grad.max(g.abs());
            }
            let tensor = params.get_mut(&name);
            if self.momentum > 0.0 {
                let vel = self
                    .velocity
                    .entry(name.clone())
                    .or_insert_with(|| vec![0.0; grad.len()]);
                for ((p, v), &g) in tensor.data.iter_mut().zip(vel.iter_mut()).zip(grad) {
                    *v = self.momentum * *v + g;
                    *p -= self.lr * *v;
                }
            } else {
                for (p, &g) in tensor.data.iter_mut().zip(grad) {
                    *p -= self.lr * g;
                }
            }
        }
        max_grad
    }
}
