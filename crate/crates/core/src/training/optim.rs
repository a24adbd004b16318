//! AdamW with decoupled weight decay, and global gradient-norm clipping.

use serde::{Deserialize, Serialize};

use crate::checkpoint::AdamState;
use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::tensor::Element;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub peak_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub epsilon: f64,
    pub warmup_steps: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            peak_lr: 5e-4,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.1,
            epsilon: 1e-8,
            warmup_steps: 5_000,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.peak_lr.is_finite() && self.peak_lr > 0.0) {
            return Err(Error::config("optimizer.peak_lr", "must be finite and > 0"));
        }
        for (field, b) in [("optimizer.beta1", self.beta1), ("optimizer.beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::config(field, "must lie in (0, 1)"));
            }
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::config("optimizer.weight_decay", "must be finite and >= 0"));
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::config("optimizer.epsilon", "must be finite and > 0"));
        }
        Ok(())
    }
}

/// One AdamW update in place. Gradients are scanned before anything is
/// touched, so a non-finite gradient leaves parameters and state intact.
pub fn adamw_step<T: Element>(
    params: &mut ParamStore<T>,
    grads: &ParamStore<T>,
    state: &mut AdamState<T>,
    lr: f64,
    opt: &OptimizerConfig,
) -> Result<()> {
    if !(params.same_layout(grads) && params.same_layout(&state.m) && params.same_layout(&state.v)) {
        return Err(Error::Incompatible(
            "parameters, gradients and optimizer moments differ in names or shapes".into(),
        ));
    }
    if !(lr.is_finite() && lr >= 0.0) {
        return Err(Error::Domain(format!("learning rate {lr} must be finite and >= 0")));
    }
    if let Some((name, _)) = grads
        .iter()
        .find(|(_, g)| g.data.iter().any(|x| !x.as_f64().is_finite()))
    {
        return Err(Error::NonFiniteGradient(name.clone()));
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - opt.beta1.powi(t);
    let bc2 = 1.0 - opt.beta2.powi(t);
    for (((_, w), (_, g)), ((_, m), (_, v))) in params
        .iter_mut()
        .zip(grads.iter())
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for i in 0..w.data.len() {
            let gi = g.data[i].as_f64();
            let mi = opt.beta1 * m.data[i].as_f64() + (1.0 - opt.beta1) * gi;
            let vi = opt.beta2 * v.data[i].as_f64() + (1.0 - opt.beta2) * gi * gi;
            m.data[i] = T::c(mi);
            v.data[i] = T::c(vi);
            let wi = w.data[i].as_f64();
            let update = (mi / bc1) / ((vi / bc2).sqrt() + opt.epsilon) + opt.weight_decay * wi;
            w.data[i] = T::c(wi - lr * update);
        }
    }
    Ok(())
}

/// Global L2 norm over every gradient scalar, accumulated in f64.
pub fn grad_norm<T: Element>(grads: &ParamStore<T>) -> f64 {
    grads
        .iter()
        .flat_map(|(_, g)| g.data.iter())
        .map(|x| {
            let x = x.as_f64();
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm<T: Element>(grads: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if norm.is_finite() && norm > max_norm {
        let s = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            for x in &mut g.data {
                *x = T::c(x.as_f64() * s);
            }
        }
    }
    norm
}
