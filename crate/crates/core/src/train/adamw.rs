use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{contract_err, Error, Result};
use crate::model::{ParamId, ParamStore};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// AdamW with decoupled weight decay and bias-corrected moments.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    step: u64,
    m: BTreeMap<ParamId, Vec<T>>,
    v: BTreeMap<ParamId, Vec<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Number of completed steps.
    pub fn t(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, id: ParamId) -> Option<&[T]> {
        self.m.get(&id).map(Vec::as_slice)
    }

    pub fn second_moment(&self, id: ParamId) -> Option<&[T]> {
        self.v.get(&id).map(Vec::as_slice)
    }

    /// Updates every trainable tensor in `params`; each must have an entry
    /// in `grads`.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &BTreeMap<ParamId, Vec<T>>) -> Result<()> {
        for (id, e) in params.entries().iter().enumerate() {
            if !e.role.trainable() {
                continue;
            }
            match grads.get(&id) {
                None => return contract_err(format!("missing gradient for {}", e.name)),
                Some(g) if g.len() != e.tensor.numel() => {
                    return contract_err(format!("gradient for {} has {} values, expected {}", e.name, g.len(), e.tensor.numel()))
                }
                Some(g) if g.iter().any(|v| !v.is_finite()) => {
                    return Err(Error::NonFinite(format!("gradient for {}", e.name)))
                }
                Some(_) => {}
            }
        }
        self.step += 1;
        let c = &self.config;
        let (lr, b1, b2, eps) = (T::lit(c.lr), T::lit(c.beta1), T::lit(c.beta2), T::lit(c.eps));
        let decay = T::one() - lr * T::lit(c.weight_decay);
        let t = self.step as i32;
        let bc1 = T::one() - b1.powi(t);
        let bc2 = T::one() - b2.powi(t);
        for id in 0..params.len() {
            if !params.entry(id).role.trainable() {
                continue;
            }
            let g = &grads[&id];
            let n = g.len();
            let m = self.m.entry(id).or_insert_with(|| vec![T::zero(); n]);
            let v = self.v.entry(id).or_insert_with(|| vec![T::zero(); n]);
            let p = params.get_mut(id).data_mut();
            for i in 0..n {
                p[i] *= decay;
                m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
