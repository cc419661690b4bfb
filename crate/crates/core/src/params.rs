use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Names ending in one of these are running statistics, not trained weights.
pub const BUFFER_SUFFIXES: [&str; 2] = [".running_mean", ".running_var"];

/// Named tensors of one network, kept in canonical (sorted) name order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct NetworkParams<T: Float = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
}

pub fn is_buffer(name: &str) -> bool {
    BUFFER_SUFFIXES.iter().any(|s| name.ends_with(s))
}

impl<T: Float> NetworkParams<T> {
    pub fn new() -> Self {
        NetworkParams { tensors: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Option<Tensor<T>> {
        self.tensors.insert(name.into(), value)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors.get(name).ok_or_else(|| Error::invalid(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter().filter(|(n, _)| !is_buffer(n))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.trainable().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<U: Float>(&self) -> NetworkParams<U> {
        NetworkParams { tensors: self.tensors.iter().map(|(n, t)| (n.clone(), t.cast())).collect() }
    }

    /// Tensors whose names start with `prefix.`, with the prefix stripped.
    pub fn sub_network(&self, prefix: &str) -> NetworkParams<T> {
        let dotted = format!("{prefix}.");
        NetworkParams {
            tensors: self
                .tensors
                .iter()
                .filter_map(|(n, t)| n.strip_prefix(&dotted).map(|s| (s.to_string(), t.clone())))
                .collect(),
        }
    }

    /// Inserts all of `other` under `prefix.`.
    pub fn merge_prefixed(&mut self, prefix: &str, other: &NetworkParams<T>) {
        for (n, t) in other.iter() {
            self.tensors.insert(format!("{prefix}.{n}"), t.clone());
        }
    }

    /// Replaces existing tensors, keeping shapes consistent.
    pub fn apply(&mut self, updates: impl IntoIterator<Item = (String, Tensor<T>)>) -> Result<()> {
        for (name, value) in updates {
            let slot = self
                .tensors
                .get_mut(&name)
                .ok_or_else(|| Error::invalid(format!("update for unknown parameter `{name}`")))?;
            if slot.shape() != value.shape() {
                return Err(Error::ShapeMismatch {
                    op: "parameter update",
                    left: slot.shape().to_vec(),
                    right: value.shape().to_vec(),
                });
            }
            *slot = value;
        }
        Ok(())
    }

    /// Same names and shapes as `other`.
    pub fn same_layout(&self, other: &NetworkParams<T>) -> bool {
        self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(other.tensors.iter()).all(|((a, x), (b, y))| a == b && x.shape() == y.shape())
    }
}

impl<T: Float> FromIterator<(String, Tensor<T>)> for NetworkParams<T> {
    fn from_iter<I: IntoIterator<Item = (String, Tensor<T>)>>(iter: I) -> Self {
        NetworkParams { tensors: iter.into_iter().collect() }
    }
}
