use std::collections::BTreeMap;

use crate::autograd::graph::Graph;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Named tensors owned by a model.
///
/// Trainable parameters have `requires_grad` set; buffers (batchnorm
/// running statistics) do not and are never touched by the optimizer.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    fn push(&mut self, name: String, tensor: Tensor<T>) -> ParamId {
        assert!(
            self.entries.iter().all(|(n, _)| *n != name),
            "duplicate parameter name {name}"
        );
        self.entries.push((name, tensor));
        ParamId(self.entries.len() - 1)
    }

    pub fn add_param(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        self.push(name.into(), tensor.with_requires_grad(true))
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        self.push(name.into(), tensor.with_requires_grad(false))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].1
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&id| self.get(id).requires_grad())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|(n, _)| n == name).map(ParamId)
    }

    pub fn trainable_count(&self) -> usize {
        self.trainable().map(|id| self.get(id).numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.entries.iter_mut().for_each(|(_, t)| t.zero_grad());
    }

    /// Adds the gradients of every parameter bound in `graph` (after
    /// `graph.backward`) into the stored tensors.
    pub fn accumulate_grads(&mut self, graph: &Graph<T>) -> Result<()> {
        for (id, var) in graph.bindings() {
            if !self.get(id).requires_grad() {
                continue;
            }
            if let Some(g) = graph.grad(var) {
                self.get_mut(id).accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    /// Writes running-statistic updates collected during a training-mode forward pass.
    pub fn apply_buffer_updates(&mut self, graph: &mut Graph<T>) -> Result<()> {
        for (id, values) in graph.take_buffer_updates() {
            let t = self.get_mut(id);
            if t.numel() != values.len() {
                return Err(Error::Invalid(format!(
                    "buffer update length {} for tensor of {}",
                    values.len(),
                    t.numel()
                )));
            }
            t.data_mut().copy_from_slice(&values);
        }
        Ok(())
    }

    /// Name-sorted snapshot, used for checkpoints and comparisons.
    pub fn snapshot(&self) -> BTreeMap<String, Tensor<T>> {
        self.entries
            .iter()
            .map(|(n, t)| (n.clone(), t.clone()))
            .collect()
    }
}
