use std::collections::HashMap;

use crate::autodiff::{BatchStats, ParamAccess};
use crate::error::{dim_err, Error, Result};
use crate::ops::BN_MOMENTUM;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Index of a tensor in a [`ParamStore`].
pub type ParamId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    /// Projection or convolution weights, positional embeddings.
    Weight,
    Bias,
    NormScale,
    NormShift,
    /// Batch-norm running mean (not trained).
    RunningMean,
    /// Batch-norm running variance (not trained).
    RunningVar,
}

impl ParamRole {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamRole::RunningMean | ParamRole::RunningVar)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub role: ParamRole,
    pub tensor: Tensor<T>,
}

/// Named model tensors in construction order: trainable parameters plus
/// batch-norm running statistics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    by_name: HashMap<String, ParamId>,
}

/// Running-statistics update produced by a training-mode forward pass.
#[derive(Clone, Debug)]
pub struct BnUpdate<T> {
    pub mean: ParamId,
    pub var: ParamId,
    pub observed: BatchStats<T>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, role: ParamRole, mut tensor: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        tensor.set_requires_grad(role.trainable());
        let id = self.entries.len();
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamEntry { name, role, tensor });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id].tensor
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|i| self.get(i))
    }

    /// Replaces a tensor keeping its role; the shape must match.
    pub fn replace(&mut self, id: ParamId, data: Vec<T>) -> Result<()> {
        let e = &mut self.entries[id];
        if e.tensor.numel() != data.len() {
            return dim_err(format!(
                "parameter {} expects {} values, got {}",
                e.name,
                e.tensor.numel(),
                data.len()
            ));
        }
        e.tensor.data_mut().copy_from_slice(&data);
        Ok(())
    }

    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.role.trainable())
            .map(|e| e.tensor.numel())
            .sum()
    }

    /// Writes backward-pass gradients into the tensors' gradient slots.
    pub fn absorb_grads<'g>(&mut self, grads: impl IntoIterator<Item = (ParamId, &'g [T])>) -> Result<()> {
        for (id, g) in grads {
            self.entries[id].tensor.set_grad(g.to_vec())?;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.entries.iter_mut().for_each(|e| e.tensor.zero_grad());
    }

    /// Folds observed batch statistics into the running averages.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate<T>]) {
        let m = T::lit(BN_MOMENTUM);
        let keep = T::one() - m;
        for u in updates {
            for (id, obs) in [(u.mean, &u.observed.mean), (u.var, &u.observed.var)] {
                for (r, &o) in self.entries[id].tensor.data_mut().iter_mut().zip(obs) {
                    *r = keep * *r + m * o;
                }
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    role: e.role,
                    tensor: e.tensor.cast(),
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}

impl ParamAccess for ParamStore<f64> {
    fn count(&self) -> usize {
        self.entries.len()
    }
    fn tensor(&self, i: usize) -> &Tensor<f64> {
        &self.entries[i].tensor
    }
    fn tensor_mut(&mut self, i: usize) -> &mut Tensor<f64> {
        &mut self.entries[i].tensor
    }
    fn label(&self, i: usize) -> String {
        self.entries[i].name.clone()
    }
}
