use std::collections::BTreeMap;

use crate::error::{Result, TensorError};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// First and second moment estimates for one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub first: Tensor,
    pub second: Tensor,
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    state: BTreeMap<ParamId, Moments>,
}

impl Adam {
    pub fn new(lr: f64, weight_decay: f64) -> Result<Self> {
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(TensorError::InvalidArgument {
                op: "adam",
                reason: format!("learning rate must be positive, got {lr}"),
            });
        }
        if !(weight_decay >= 0.0) {
            return Err(TensorError::InvalidArgument {
                op: "adam",
                reason: format!("weight decay must be nonnegative, got {weight_decay}"),
            });
        }
        Ok(Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            state: BTreeMap::new(),
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, id: ParamId) -> Option<&Moments> {
        self.state.get(&id)
    }

    /// Restores optimizer state, e.g. from a checkpoint.
    pub fn restore(&mut self, step: u64, state: BTreeMap<ParamId, Moments>) {
        self.step = step;
        self.state = state;
    }

    pub fn state(&self) -> &BTreeMap<ParamId, Moments> {
        &self.state
    }

    /// Applies one update to every parameter in `store`. Parameters without a
    /// gradient are treated as having a zero gradient.
    ///
    /// Gradients are validated before anything is modified, so a non-finite
    /// gradient leaves both the parameters and the moments untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<ParamId, Tensor>) -> Result<()> {
        for (id, g) in grads {
            if g.shape() != store.get(*id).shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "adam_step",
                    left: store.get(*id).shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
            if !g.is_finite() {
                return Err(TensorError::NanGradient {
                    name: store.name(*id).to_string(),
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let grad = grads.get(&id);
            let shape = store.get(id).shape().to_vec();
            let m = self.state.entry(id).or_insert_with(|| Moments {
                first: Tensor::zeros(&shape),
                second: Tensor::zeros(&shape),
            });
            let p = store.get_mut(id);
            let n = p.numel();
            for i in 0..n {
                let g = grad.map_or(0.0, |g| g.data()[i]);
                let m1 = &mut m.first.data_mut()[i];
                *m1 = self.beta1 * *m1 + (1.0 - self.beta1) * g;
                let m1v = *m1;
                let m2 = &mut m.second.data_mut()[i];
                *m2 = self.beta2 * *m2 + (1.0 - self.beta2) * g * g;
                let m2v = *m2;
                let mhat = m1v / bc1;
                let vhat = m2v / bc2;
                let w = &mut p.data_mut()[i];
                *w -= self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * *w);
            }
        }
        Ok(())
    }
}
