use std::collections::BTreeMap;

use crate::autodiff::tape::{Gradients, Tape, Var};
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

/// Named, ordered parameter tensors. Iteration order is the lexicographic
/// order of the names, which keeps optimizer updates and serialization
/// deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

/// Tape handles for every parameter of a [`ParamStore`] in one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Binding {
    vars: BTreeMap<String, Var>,
}

impl Binding {
    pub fn from_vars(vars: BTreeMap<String, Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::contract(format!("unknown parameter {name}")))
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.params.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Merges `other` into `self`; names must not collide.
    pub fn extend(&mut self, other: ParamStore) -> Result<()> {
        for (k, v) in other.params {
            if self.params.contains_key(&k) {
                return Err(Error::contract(format!("duplicate parameter {k}")));
            }
            self.params.insert(k, v);
        }
        Ok(())
    }

    /// Records every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Binding {
        let vars = self.params.iter().map(|(k, t)| (k.clone(), tape.leaf(t))).collect();
        Binding { vars }
    }

    /// Adds the gradients of a backward pass into each parameter's grad buffer.
    pub fn accumulate(&mut self, binding: &Binding, grads: &Gradients) -> Result<()> {
        for (name, t) in self.params.iter_mut() {
            if !t.requires_grad() {
                continue;
            }
            if let Some(&v) = binding.vars.get(name) {
                grads.accumulate_into(v, t)?;
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.params.values_mut().for_each(Tensor::zero_grad);
    }

    /// Multiplies every accumulated gradient by `s` (batch averaging).
    pub fn scale_grads(&mut self, s: f64) {
        for t in self.params.values_mut() {
            if let Some(g) = t.grad().map(|g| g.iter().map(|v| v * s).collect::<Vec<_>>()) {
                t.zero_grad();
                t.accumulate_grad(&g).expect("same shape");
            }
        }
    }
}
