//! Per-feature batch normalization with learnable affine and running stats.
//!
//! Gamma and beta live in the model's [`ParamSet`] as trainable parameters;
//! running mean and variance live there too but are never trainable (they are
//! updated in place from batch statistics, not by the optimizer). Train mode
//! normalizes by biased batch variance while the running variance accumulates
//! the unbiased estimate; eval mode normalizes by the stored running stats.

use crate::error::{Error, Result};
use crate::numerics::params::{ParamId, ParamSet};
use crate::numerics::tape::{Tape, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Handles for one batch-norm instance: affine parameters plus running stats.
#[derive(Debug, Clone, Copy)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub dim: usize,
}

impl BatchNorm {
    /// Register gamma=1, beta=0, running mean 0, running variance 1 under
    /// `prefix.{gamma,beta,running_mean,running_var}`.
    pub fn init(params: &mut ParamSet, prefix: &str, dim: usize) -> Self {
        let gamma = params.insert(format!("{prefix}.gamma"), vec![dim], vec![1.0; dim], true);
        let beta = params.insert(format!("{prefix}.beta"), vec![dim], vec![0.0; dim], true);
        let running_mean = params.insert(
            format!("{prefix}.running_mean"),
            vec![dim],
            vec![0.0; dim],
            false,
        );
        let running_var = params.insert(
            format!("{prefix}.running_var"),
            vec![dim],
            vec![1.0; dim],
            false,
        );
        BatchNorm {
            gamma,
            beta,
            running_mean,
            running_var,
            dim,
        }
    }

    /// Rebuild the handle set from a loaded [`ParamSet`] by name.
    pub fn lookup(params: &ParamSet, prefix: &str, dim: usize) -> Result<Self> {
        let get = |suffix: &str| {
            params
                .lookup(&format!("{prefix}.{suffix}"))
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {prefix}.{suffix}")))
        };
        Ok(BatchNorm {
            gamma: get("gamma")?,
            beta: get("beta")?,
            running_mean: get("running_mean")?,
            running_var: get("running_var")?,
            dim,
        })
    }

    /// Normalize `x` (n x dim). Train mode uses batch statistics, updates the
    /// running stats in place, and needs n >= 2; eval mode reads the stored
    /// stats and leaves them untouched.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &mut ParamSet,
        x: Tensor,
        mode: BnMode,
    ) -> Result<Tensor> {
        let gamma = tape.bind(params, self.gamma);
        let beta = tape.bind(params, self.beta);
        match mode {
            BnMode::Train => {
                let n = tape.rows(x);
                let (out, mean, var_biased) = tape.bn_train(x, gamma, beta, BN_EPS)?;
                // Unbiased variance feeds the running estimate.
                let correction = n as f64 / (n as f64 - 1.0);
                let rm = params.data_mut(self.running_mean);
                for (r, m) in rm.iter_mut().zip(&mean) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
                }
                let rv = params.data_mut(self.running_var);
                for (r, v) in rv.iter_mut().zip(&var_biased) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * (v * correction);
                }
                Ok(out)
            }
            BnMode::Eval => {
                let mean = params.data(self.running_mean).to_vec();
                let var = params.data(self.running_var).to_vec();
                tape.bn_eval(x, gamma, beta, &mean, &var, BN_EPS)
            }
        }
    }

    /// Every parameter this instance owns, in registration order.
    pub fn param_ids(&self) -> [ParamId; 4] {
        [self.gamma, self.beta, self.running_mean, self.running_var]
    }
}
