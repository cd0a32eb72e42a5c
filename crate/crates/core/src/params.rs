//! Named parameter collections with frozen/trainable flags.

use std::collections::HashMap;

use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub trainable: bool,
}

/// Ordered, name-addressable set of tensors.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ModelParams<T> {
    entries: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ModelParams<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>, trainable: bool) {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(Param {
            name,
            tensor,
            trainable,
        });
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i].tensor)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.entries[i].tensor),
            None => Err(Error::invalid(format!("unknown parameter {name}"))),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|p| p.name.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.entries.iter().map(|p| p.tensor.len()).sum()
    }

    /// SHA-256 over names, shapes and raw little-endian values.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        let mut buf = Vec::new();
        for p in &self.entries {
            h.update(p.name.as_bytes());
            for &d in p.tensor.shape() {
                h.update((d as u64).to_le_bytes());
            }
            buf.clear();
            for &v in p.tensor.data() {
                v.write_le(&mut buf);
            }
            h.update(&buf);
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        let mut out = ModelParams::new();
        for p in &self.entries {
            out.insert(p.name.clone(), p.tensor.cast(), p.trainable);
        }
        out
    }

    /// Records every tensor on `tape`; only trainable entries become
    /// gradient-carrying leaves.
    pub fn bind(&self, tape: &Tape<T>) -> BoundParams {
        let vars = self
            .entries
            .iter()
            .map(|p| {
                let v = if p.trainable {
                    tape.param(p.tensor.clone())
                } else {
                    tape.constant(p.tensor.clone())
                };
                (p.name.clone(), v)
            })
            .collect();
        BoundParams { vars }
    }

    /// Records every tensor as a constant, for gradient-free evaluation.
    pub fn bind_constants(&self, tape: &Tape<T>) -> BoundParams {
        let vars = self
            .entries
            .iter()
            .map(|p| (p.name.clone(), tape.constant(p.tensor.clone())))
            .collect();
        BoundParams { vars }
    }
}

/// Parameter names mapped to their leaves on one tape.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: HashMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("parameter {name} not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }
}
