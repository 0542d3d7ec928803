//! AdamW with decoupled weight decay and a cosine-annealed learning rate.

use std::f64::consts::PI;

use super::params::{ParamId, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Per-parameter moment accumulators and the step counter.
#[derive(Clone, Debug)]
pub struct OptimState {
    pub config: AdamWConfig,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl OptimState {
    /// Zeroes both moments of entries `range` of parameter `index`.
    pub fn reset_moments(&mut self, index: usize, range: std::ops::Range<usize>) {
        self.m[index][range.clone()].fill(0.0);
        self.v[index][range].fill(0.0);
    }

    pub fn new(params: &[Tensor], config: AdamWConfig) -> Self {
        OptimState {
            config,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    pub fn for_store(store: &ParamStore, config: AdamWConfig) -> Self {
        Self::new(store.tensors(), config)
    }
}

/// One AdamW update. `grads[i]` pairs with `params[i]`.
///
/// The decay `p ← p − lr·wd·p` is applied first, then the bias-corrected
/// moment step `p ← p − lr·m̂/(√v̂ + eps)`.
pub fn adamw_step(params: &mut [Tensor], grads: &[Tensor], state: &mut OptimState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape("adamw_step", &[params.len()], &[grads.len(), state.m.len()]));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::shape("adamw_step", p.shape(), g.shape()));
        }
    }
    for (i, m) in state.m.iter().enumerate() {
        if m.len() != params[i].numel() {
            return Err(Error::shape("adamw_step", params[i].shape(), &[m.len()]));
        }
    }
    state.step += 1;
    let AdamWConfig {
        beta1,
        beta2,
        eps,
        weight_decay,
    } = state.config;
    let bc1 = 1.0 - beta1.powi(state.step as i32);
    let bc2 = 1.0 - beta2.powi(state.step as i32);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, (pv, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            *pv -= lr * weight_decay * *pv;
            m[j] = beta1 * m[j] + (1.0 - beta1) * gv;
            v[j] = beta2 * v[j] + (1.0 - beta2) * gv * gv;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            *pv -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// AdamW over a parameter store with a sparse list of gradients; parameters
/// without a gradient entry are treated as having zero gradient.
pub fn adamw_step_store(
    store: &mut ParamStore,
    grads: &[(ParamId, Tensor)],
    state: &mut OptimState,
    lr: f64,
) -> Result<()> {
    let mut full: Vec<Tensor> = store.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
    for (id, g) in grads {
        if full[id.index()].shape() != g.shape() {
            return Err(Error::shape("adamw_step", full[id.index()].shape(), g.shape()));
        }
        full[id.index()] = g.clone();
    }
    adamw_step(store.tensors_mut(), &full, state, lr)
}

/// Rescale gradients so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm(grads: &mut [(ParamId, Tensor)], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|(_, g)| g.sq_norm()).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            g.scale_assign(s);
        }
    }
    norm
}

/// `lr_min + ½(lr_max − lr_min)(1 + cos(π·step/total))`; steps past `total`
/// clamp to `lr_min`.
pub fn cosine_anneal_lr(step: u64, total_steps: u64, lr_max: f64, lr_min: f64) -> f64 {
    if total_steps == 0 || step >= total_steps {
        return if step == 0 && total_steps == 0 { lr_max } else { lr_min };
    }
    let frac = step as f64 / total_steps as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (PI * frac).cos())
}
