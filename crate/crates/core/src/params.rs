//! Named parameter collections and their binding onto a tape.

use std::collections::HashMap;

use indexmap::IndexMap;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Adam, Real, Tape, Tensor, Var};

/// Parameters in registration order, keyed by dotted name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn trainable_numel(&self) -> usize {
        self.tensors
            .values()
            .filter(|t| t.is_trainable())
            .map(Tensor::numel)
            .sum()
    }

    pub fn set_trainable_where(&mut self, pred: impl Fn(&str) -> bool) {
        for (name, t) in &mut self.tensors {
            t.set_trainable(pred(name));
        }
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        self.set_trainable_where(|_| trainable);
    }

    /// Records every parameter as a tape leaf. Gradients are tracked for
    /// trainable tensors only, and only when `track` is set.
    pub fn bind<T: Real>(&self, tape: &mut Tape<T>, track: bool) -> Bound {
        let mut bound = Bound::default();
        for (name, t) in &self.tensors {
            bound.vars.insert(name.clone(), tape.param(t, track));
        }
        bound
    }

    /// Moves tape gradients into the trainable tensors. A trainable tensor
    /// that the loss did not reach gets an explicit zero gradient.
    pub fn collect_grads<T: Real>(&mut self, tape: &Tape<T>, bound: &Bound) {
        for (name, t) in &mut self.tensors {
            if !t.is_trainable() {
                continue;
            }
            match bound.vars.get(name).and_then(|&v| tape.grad(v)) {
                Some(g) => {
                    let g: Vec<f32> = g.iter().map(|x| x.as_f32()).collect();
                    t.accumulate_grad(&g);
                }
                None => {
                    let zeros = vec![0.0; t.numel()];
                    t.accumulate_grad(&zeros);
                }
            }
        }
    }

    pub fn clear_grads(&mut self) {
        self.tensors.values_mut().for_each(Tensor::clear_grad);
    }

    pub fn adam_step(&mut self, adam: &mut Adam) -> Result<()> {
        adam.step(self.iter_mut())
    }

    /// SHA-256 over names, shapes and value bits, in registration order.
    pub fn digest(&self) -> String {
        digest_tensors(self.iter())
    }

    /// Digest over a subset of the parameters.
    pub fn digest_where(&self, pred: impl Fn(&str) -> bool) -> String {
        digest_tensors(self.iter().filter(|(n, _)| pred(n)))
    }
}

fn digest_tensors<'a>(items: impl Iterator<Item = (&'a str, &'a Tensor)>) -> String {
    let mut h = Sha256::new();
    for (name, t) in items {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        for &d in t.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for &x in t.data() {
            h.update(x.to_bits().to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Tape handles for a set of named parameters.
#[derive(Debug, Clone, Default)]
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn insert(&mut self, name: impl Into<String>, v: Var) {
        self.vars.insert(name.into(), v);
    }

    pub fn extend(&mut self, other: Bound) {
        self.vars.extend(other.vars);
    }
}
