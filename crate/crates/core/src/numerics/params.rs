use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub tensor: Tensor,
    pub grad: Tensor,
}

impl Parameter {
    pub fn new(tensor: Tensor) -> Self {
        let grad = Tensor::zeros(tensor.shape());
        Self { tensor, grad }
    }
}

/// Named trainable tensors, iterated in lexicographic name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamTree {
    entries: BTreeMap<String, Parameter>,
}

impl ParamTree {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        self.entries.insert(name, Parameter::new(tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.entries.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Parameter)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Parameter)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar weights.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|p| p.tensor.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Digest of names, shapes and value bits; equal trees hash equal.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, p) in &self.entries {
            h.update(name.as_bytes());
            for d in p.tensor.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in p.tensor.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// True when both trees hold the same names, shapes and bitwise values.
    pub fn same_values(&self, other: &ParamTree) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|((na, a), (nb, b))| {
                na == nb
                    && a.tensor.shape() == b.tensor.shape()
                    && a
                        .tensor
                        .data()
                        .iter()
                        .zip(b.tensor.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}
