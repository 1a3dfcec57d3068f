//! SGD with Nesterov momentum, decoupled-from-bias weight decay, and a
//! polynomial learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Params, SegModel};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub nesterov: bool,
    pub poly_exponent: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            nesterov: true,
            poly_exponent: 0.9,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config("base_lr must be a finite value >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        if !(self.poly_exponent >= 0.0 && self.poly_exponent.is_finite()) {
            return Err(Error::Config("poly_exponent must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    pub total_iters: usize,
    velocity: Params,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, total_iters: usize, model: &SegModel) -> Result<Self> {
        config.validate()?;
        if total_iters == 0 {
            return Err(Error::Config("total_iters must be >= 1".into()));
        }
        Ok(Self {
            config,
            total_iters,
            velocity: Params::zeros(&model.architecture()),
        })
    }

    /// `base_lr * (1 - iter / N)^p`, zero from `iter >= N` on.
    pub fn learning_rate(&self, iter: usize) -> f64 {
        let frac = 1.0 - (iter as f64 / self.total_iters as f64).min(1.0);
        self.config.base_lr * frac.powf(self.config.poly_exponent)
    }

    pub fn velocity(&self) -> &Params {
        &self.velocity
    }
}

/// One SGD update at schedule position `iter` (0-based).
pub fn sgd_step(model: &mut SegModel, opt: &mut OptimizerState, grads: &Params, iter: usize) -> Result<()> {
    if !grads.same_shape(&model.params) {
        return Err(Error::shape("gradients matching the model", "mismatched gradient blocks"));
    }
    let lr = opt.learning_rate(iter);
    let cfg = opt.config;
    let blocks = model
        .params
        .blocks_mut()
        .into_iter()
        .zip(opt.velocity.blocks_mut())
        .zip(grads.blocks())
        .zip(Params::IS_WEIGHT);
    for (((theta, vel), grad), is_weight) in blocks {
        let decay = if is_weight { cfg.weight_decay } else { 0.0 };
        for ((t, v), &g) in theta.iter_mut().zip(vel.iter_mut()).zip(grad) {
            let g = g + decay * *t;
            *v = cfg.momentum * *v + g;
            let step = if cfg.nesterov { g + cfg.momentum * *v } else { *v };
            *t -= lr * step;
        }
    }
    if !model.params.all_finite() {
        return Err(Error::Numerical(format!("non-finite parameter after step {iter}")));
    }
    Ok(())
}
