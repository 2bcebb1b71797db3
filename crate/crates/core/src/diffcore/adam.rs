use serde::{Deserialize, Serialize};

use super::params::{Gradients, ParamStore, Partition};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates, lazily allocated per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<F> {
    pub config: AdamConfig,
    pub t: u64,
    pub m: Vec<Option<Tensor<F>>>,
    pub v: Vec<Option<Tensor<F>>>,
}

impl<F: Real> AdamState<F> {
    pub fn new(config: AdamConfig, store: &ParamStore<F>) -> Self {
        AdamState {
            config,
            t: 0,
            m: vec![None; store.len()],
            v: vec![None; store.len()],
        }
    }
}

/// One bias-corrected Adam update of the trainable parameters in `subset`.
/// The subset's gradients are zeroed afterwards; everything outside the
/// subset is left untouched.
pub fn adam_step<F: Real>(
    store: &mut ParamStore<F>,
    state: &mut AdamState<F>,
    grads: &mut Gradients<F>,
    subset: &[Partition],
) -> Result<()> {
    let ids = store.select(subset);
    if let Some(&id) = ids.iter().find(|&&id| grads.get(id).is_none()) {
        return Err(Error::MissingGrad(store.name(id).to_string()));
    }
    if state.m.len() < store.len() {
        state.m.resize(store.len(), None);
        state.v.resize(store.len(), None);
    }
    state.t += 1;
    let c = state.config;
    let t = state.t as i32;
    let b1 = F::of(c.beta1);
    let b2 = F::of(c.beta2);
    let one = F::one();
    let lr = F::of(c.lr);
    let eps = F::of(c.eps);
    let bc1 = F::of(1.0 - c.beta1.powi(t));
    let bc2 = F::of(1.0 - c.beta2.powi(t));
    for &id in &ids {
        let g = grads.get(id).expect("checked above");
        let shape = g.shape().to_vec();
        let m = state.m[id.index()].get_or_insert_with(|| Tensor::zeros(&shape));
        let v = state.v[id.index()].get_or_insert_with(|| Tensor::zeros(&shape));
        let p = store.value_mut(id).data_mut();
        for (((pi, &gi), mi), vi) in p
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = b1 * *mi + (one - b1) * gi;
            *vi = b2 * *vi + (one - b2) * gi * gi;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *pi -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    grads.zero(&ids);
    Ok(())
}
