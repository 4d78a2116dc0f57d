use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::tensor::{GradientMap, ParamStore, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// First and second moments per parameter plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<T> {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> OptimState<T> {
    pub fn new(store: &ParamStore<T>, config: AdamWConfig) -> Self {
        let zeros = || store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn matches(&self, store: &ParamStore<T>) -> bool {
        self.m.len() == store.len()
            && store
                .iter()
                .zip(&self.m)
                .zip(&self.v)
                .all(|(((_, _, p), m), v)| p.shape() == m.shape() && p.shape() == v.shape())
    }
}

/// One decoupled-weight-decay Adam update at learning rate `lr`:
/// `theta -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)`.
pub fn adamw_step<T: Real>(
    store: &mut ParamStore<T>,
    grads: &GradientMap<T>,
    state: &mut OptimState<T>,
    lr: f64,
) -> Result<()> {
    if !state.matches(store) || grads.len() != store.len() {
        return Err(dim_err!("optimizer state or gradients do not mirror the parameters"));
    }
    if let Some(id) = grads.first_non_finite() {
        return Err(Error::Training(format!("non-finite gradient for `{}`", store.name(id))));
    }
    state.step += 1;
    let c = state.config;
    let t = state.step as f64;
    let bc1 = 1.0 - c.beta1.powf(t);
    let bc2 = 1.0 - c.beta2.powf(t);
    let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
    let (one, eps, wd, lr_t) = (T::one(), T::lit(c.eps), T::lit(c.weight_decay), T::lit(lr));
    let (bc1, bc2) = (T::lit(bc1), T::lit(bc2));
    let ids: Vec<_> = store.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        let g = grads.get(id).data();
        let (m, v) = (state.m[k].data_mut(), state.v[k].data_mut());
        let p = store.get_mut(id).data_mut();
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (one - b1) * g[i];
            v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] = p[i] - lr_t * (m_hat / (v_hat.sqrt() + eps) + wd * p[i]);
        }
    }
    Ok(())
}

/// Rescales gradients so their global norm is at most `max_norm`. Returns
/// the norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut GradientMap<T>, max_norm: f64) -> f64 {
    let norm = grads.global_norm().as_f64();
    if max_norm > 0.0 && norm > max_norm {
        grads.scale(T::lit(max_norm / norm));
    }
    norm
}

/// Learning rate at `step` of a stage lasting `total` steps: linear warm-up
/// from zero over the first `warmup` fraction, then `base`, divided by
/// `decay` from the halfway step on.
pub fn lr_schedule(step: usize, total: usize, base: f64, warmup: f64, decay: f64) -> f64 {
    let warm = (warmup * total as f64).round() as usize;
    let ramp = if step < warm { step as f64 / warm as f64 } else { 1.0 };
    let factor = if 2 * step >= total { 1.0 / decay } else { 1.0 };
    base * ramp * factor
}
