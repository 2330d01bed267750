use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::array::Array;
use crate::error::{Error, Result};
use crate::model::{is_no_decay, ParamStore};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// First and second moments per trainable tensor.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptimizerState<T> {
    pub step: u64,
    pub m: IndexMap<String, Vec<T>>,
    pub v: IndexMap<String, Vec<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new() -> Self {
        OptimizerState { step: 0, m: IndexMap::new(), v: IndexMap::new() }
    }
}

/// Global L2 norm over all gradients.
pub fn grad_norm<T: Scalar>(grads: &IndexMap<String, Array<T>>) -> f64 {
    grads.values().flat_map(|g| g.data().iter()).map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt()
}

/// One AdamW update with decoupled weight decay (`p -= lr * wd * p` before
/// the moment step). Layer-norm parameters and embeddings are not decayed.
/// Every gradient is checked before any parameter changes; a non-finite
/// gradient aborts with the tensor name. `clip` rescales gradients to a
/// maximum global norm.
pub fn adamw_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &IndexMap<String, Array<T>>,
    state: &mut OptimizerState<T>,
    lr: f64,
    config: &AdamWConfig,
    clip: Option<f64>,
) -> Result<()> {
    for (name, g) in grads {
        let p = params.get(name)?;
        if p.shape() != g.shape() {
            return Err(Error::shape("adamw_step", p.shape(), g.shape()));
        }
        if !g.all_finite() {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
    }
    let scale = match clip {
        Some(max) => {
            let norm = grad_norm(grads);
            if norm > max {
                max / norm
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::of(config.beta1), T::of(config.beta2));
    let c1 = T::of(1.0 - config.beta1.powi(t));
    let c2 = T::of(1.0 - config.beta2.powi(t));
    let (lr_t, eps, scale) = (T::of(lr), T::of(config.eps), T::of(scale));
    let decay = T::of(1.0 - lr * config.weight_decay);
    for (name, g) in grads {
        let p = params.get_mut(name)?;
        let n = p.len();
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![T::zero(); n]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![T::zero(); n]);
        let apply_decay = config.weight_decay != 0.0 && !is_no_decay(name);
        for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            let gi = gi * scale;
            if apply_decay {
                *w *= decay;
            }
            *mi = b1 * *mi + (T::one() - b1) * gi;
            *vi = b2 * *vi + (T::one() - b2) * gi * gi;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            *w -= lr_t * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}
