//! Named parameter tensors addressed by [`ParamId`].
//!
//! Models hold ids, not tensors, so two models can reference the same
//! tensor (the shared token embedding) without copying it.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Replaces a tensor, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        if value.shape() != self.tensors[id.0].shape() {
            return Err(Error::dim(
                "param set",
                format!(
                    "{}: {:?} vs {:?}",
                    self.names[id.0],
                    value.shape(),
                    self.tensors[id.0].shape()
                ),
            ));
        }
        self.tensors[id.0] = value;
        Ok(())
    }

    /// Concatenates the given tensors in order.
    pub fn flatten(&self, ids: &[ParamId]) -> Vec<f64> {
        let mut out = Vec::with_capacity(ids.iter().map(|i| self.get(*i).len()).sum());
        for id in ids {
            out.extend_from_slice(self.get(*id).data());
        }
        out
    }

    pub fn numel(&self, ids: &[ParamId]) -> usize {
        ids.iter().map(|i| self.get(*i).len()).sum()
    }
}

/// Gaussian init with the given std.
pub fn normal_tensor<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
    let dist = Normal::new(0.0, std).expect("std is finite and positive");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect())
        .expect("length matches shape")
}

/// Per-tape mapping from parameters to leaf nodes.
#[derive(Debug, Default)]
pub struct Binder {
    vars: Vec<Option<Var>>,
}

impl Binder {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            vars: vec![None; store.len()],
        }
    }

    /// Leaf for `id`, created on first use.
    pub fn bind(&mut self, tape: &mut Tape, store: &ParamStore, id: ParamId) -> Result<Var> {
        if let Some(v) = self.vars[id.0] {
            return Ok(v);
        }
        let v = tape.leaf(store.get(id).clone())?;
        self.vars[id.0] = Some(v);
        Ok(v)
    }

    /// Binds `id` to an existing node, e.g. a perturbed copy under test.
    pub fn preset(&mut self, id: ParamId, var: Var) {
        self.vars[id.0] = Some(var);
    }

    pub fn var(&self, id: ParamId) -> Option<Var> {
        self.vars[id.0]
    }

    /// Gradient of `id`, zeros when the parameter never entered the tape.
    pub fn grad(&self, grads: &Gradients, store: &ParamStore, id: ParamId) -> Tensor {
        self.vars[id.0]
            .and_then(|v| grads.get(v).cloned())
            .unwrap_or_else(|| Tensor::zeros(store.get(id).shape()))
    }

    /// Gradients of `ids` concatenated in order.
    pub fn flat_grad(&self, grads: &Gradients, store: &ParamStore, ids: &[ParamId]) -> Vec<f64> {
        let mut out = Vec::with_capacity(store.numel(ids));
        for &id in ids {
            match self.vars[id.0].and_then(|v| grads.get(v)) {
                Some(g) => out.extend_from_slice(g.data()),
                None => out.extend(std::iter::repeat_n(0.0, store.get(id).len())),
            }
        }
        out
    }
}
