use serde::{Deserialize, Serialize};

use crate::tensor::{ParamStore, Tensor};

/// Linear warmup then inverse square-root decay:
/// `base · min(step^-0.5, step · warmup^-1.5)`, steps counted from 1.
pub fn transformer_lr(step: u64, base_lr: f64, warmup_steps: u64) -> f64 {
    let s = step.max(1) as f64;
    let w = warmup_steps.max(1) as f64;
    base_lr * s.powf(-0.5).min(s * w.powf(-1.5))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

/// First and second moments per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let c = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= c);
        }
    }
    norm
}

/// One bias-corrected Adam step with learning rate `lr`. Returns `false`
/// without touching anything if a gradient is not finite.
pub fn adam_update(
    params: &mut ParamStore,
    grads: &[Tensor],
    state: &mut AdamState,
    cfg: &AdamConfig,
    lr: f64,
) -> bool {
    assert_eq!(grads.len(), params.len(), "one gradient per parameter");
    if !grads.iter().all(Tensor::is_finite) {
        return false;
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (((p, g), m), v) in params
        .tensors_mut()
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        assert_eq!(p.shape(), g.shape(), "gradient shape");
        for (((w, &g), m), v) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            *w -= lr * (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
        }
    }
    true
}
