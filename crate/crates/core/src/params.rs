//! Named, ordered parameter storage with per-parameter freeze flags.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A learnable tensor plus its optimisation state.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub frozen: bool,
    /// Accumulated gradient, same shape as `value` when present.
    pub grad: Option<Tensor>,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        Param {
            value,
            frozen: false,
            grad: None,
        }
    }

    pub fn trainable(&self) -> bool {
        !self.frozen
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }
}

/// Insertion-ordered map from parameter name to [`Param`].
///
/// The order is the canonical serialisation order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Param)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, Param::new(tensor)));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    /// Lookup that fails with a configuration error naming the parameter.
    pub fn require(&self, name: &str) -> Result<&Param> {
        self.get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(n, p)| (n.as_str(), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.entries.iter_mut().map(|(n, p)| (n.as_str(), p))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_numel(&self) -> usize {
        self.entries.iter().map(|(_, p)| p.numel()).sum()
    }

    pub fn trainable_numel(&self) -> usize {
        self.entries
            .iter()
            .filter(|(_, p)| p.trainable())
            .map(|(_, p)| p.numel())
            .sum()
    }

    pub fn set_frozen_all(&mut self, frozen: bool) {
        for (_, p) in &mut self.entries {
            p.frozen = frozen;
        }
    }

    pub fn zero_grad(&mut self) {
        for (_, p) in &mut self.entries {
            p.grad = None;
        }
    }

    /// `(name, tensor)` pairs in canonical order.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.entries
            .iter()
            .map(|(n, p)| (n.clone(), p.value.clone()))
            .collect()
    }
}
