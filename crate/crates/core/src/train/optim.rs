//! Learning-rate schedule and Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Real;

/// Linear warmup to `base` over `warmup` steps, constant afterwards.
/// Steps are 1-based.
pub fn lr_schedule(step: u64, base: f64, warmup: u64) -> f64 {
    if warmup == 0 || step >= warmup {
        base
    } else {
        base * step as f64 / warmup as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// First and second moments per parameter (store order) and the shared
/// step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub t: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || store.iter().map(|(_, p)| vec![T::zero(); p.tensor.len()]).collect();
        Self {
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn matches(&self, store: &ParamStore<T>) -> bool {
        self.m.len() == store.len()
            && self.v.len() == store.len()
            && store
                .iter()
                .all(|(id, p)| self.m[id.index()].len() == p.tensor.len() && self.v[id.index()].len() == p.tensor.len())
    }
}

/// One bias-corrected Adam update of every trainable parameter from the
/// gradients held in the store. A missing gradient counts as zero. Any NaN
/// gradient aborts before a single value changes.
pub fn adam_step<T: Real>(
    store: &mut ParamStore<T>,
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if !state.matches(store) {
        return Err(Error::invalid(
            "adam_step",
            "optimizer state does not match the parameters",
        ));
    }
    for (_, p) in store.iter() {
        if p.trainable {
            if let Some(g) = p.tensor.grad.as_deref() {
                if g.iter().any(|x| x.is_nan()) {
                    return Err(Error::NanGradient(p.name.clone()));
                }
            }
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let (one_b1, one_b2) = (T::lit(1.0 - cfg.beta1), T::lit(1.0 - cfg.beta2));
    let step = T::lit(lr / c1);
    let rc2 = T::lit(1.0 / c2.sqrt());
    let eps = T::lit(cfg.eps);
    for (i, p) in store.iter_mut().enumerate() {
        if !p.trainable {
            continue;
        }
        let decay = if p.decay {
            T::lit(lr * cfg.weight_decay)
        } else {
            T::zero()
        };
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let grad = p.tensor.grad.take();
        let data = p.tensor.data_mut();
        for j in 0..data.len() {
            let g = grad.as_ref().map_or(T::zero(), |g| g[j]);
            m[j] = b1 * m[j] + one_b1 * g;
            v[j] = b2 * v[j] + one_b2 * g * g;
            let theta = data[j];
            data[j] = theta - step * m[j] / (v[j].sqrt() * rc2 + eps) - decay * theta;
        }
        p.tensor.grad = grad;
    }
    Ok(())
}
