//! Named parameter storage shared by all model components.
//!
//! Parameters live outside any graph; each training step binds them as leaves
//! in registration order, which keeps node ids, gradient accumulation order,
//! and checkpoint layout deterministic.

use crate::error::{Result, SdpError};

use super::graph::{Graph, Var};
use super::scalar::Scalar;
use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Entry<T> {
    name: String,
    value: Tensor<T>,
    trainable: bool,
}

pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
}

/// Leaf vars for every parameter of one graph, indexed by [`ParamId`].
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Assemble from explicit leaf vars in parameter order; lets gradient
    /// checks drive model forwards with their own leaves.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Binding { vars }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.insert(name.into(), value, true)
    }

    /// Registered but never updated and never receiving gradients.
    pub fn add_frozen(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.insert(name.into(), value, false)
    }

    fn insert(&mut self, name: String, value: Tensor<T>, trainable: bool) -> ParamId {
        debug_assert!(
            !self.entries.iter().any(|e| e.name == name),
            "duplicate parameter {name}"
        );
        self.entries.push(Entry {
            name,
            value: value.requires_grad(trainable),
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let entry = &mut self.entries[id.0];
        if entry.value.shape() != value.shape() {
            return Err(SdpError::ShapeMismatch {
                op: "set_value",
                lhs: entry.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        entry.value = value.requires_grad(entry.trainable);
        Ok(())
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e.name.as_str(), &e.value))
    }

    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    pub fn trainable_elements(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.numel())
            .sum()
    }

    /// Register every parameter as a graph leaf, in registration order.
    pub fn bind(&self, graph: &mut Graph<T>) -> Binding {
        Binding {
            vars: self
                .entries
                .iter()
                .map(|e| graph.leaf(e.value.clone()))
                .collect(),
        }
    }
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}
