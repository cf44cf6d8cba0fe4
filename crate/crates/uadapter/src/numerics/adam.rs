//! Adam optimizer with bias-corrected moment estimates.

use std::collections::HashMap;

use crate::numerics::params::{ParamId, ParamSet};
use crate::numerics::tape::Gradients;

#[derive(Debug, Clone)]
struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    slots: HashMap<usize, Slot>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            slots: HashMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Apply one update to every trainable parameter that received a
    /// gradient. Parameters absent from `grads` keep their values and their
    /// moment state untouched.
    pub fn step(&mut self, params: &mut ParamSet, grads: &Gradients) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for id in grads.param_ids() {
            let grad = grads
                .param(id)
                .expect("param_ids only lists parameters with gradients");
            let data = params.data_mut(id);
            let slot = self.slots.entry(id.index()).or_insert_with(|| Slot {
                m: vec![0.0; data.len()],
                v: vec![0.0; data.len()],
            });
            debug_assert_eq!(slot.m.len(), data.len());
            for i in 0..data.len() {
                let g = grad[i];
                slot.m[i] = self.beta1 * slot.m[i] + (1.0 - self.beta1) * g;
                slot.v[i] = self.beta2 * slot.v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = slot.m[i] / bc1;
                let v_hat = slot.v[i] / bc2;
                data[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }

    /// Drop moment state for a parameter (used when a parameter leaves the
    /// trainable set for good).
    pub fn forget(&mut self, id: ParamId) {
        self.slots.remove(&id.index());
    }
}
