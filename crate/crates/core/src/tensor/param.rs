use std::collections::HashMap;

use super::{Element, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct ParamEntry<T: Element> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub apply_weight_decay: bool,
}

/// Insertion-ordered map from hierarchical names to trainable tensors, plus
/// non-trainable state buffers (batch-norm running statistics).
#[derive(Clone, Debug)]
pub struct ParamRegistry<T: Element = f32> {
    params: Vec<ParamEntry<T>>,
    buffers: Vec<(String, Tensor<T>)>,
    index: HashMap<String, usize>,
    buffer_index: HashMap<String, usize>,
}

impl<T: Element> Default for ParamRegistry<T> {
    fn default() -> Self {
        ParamRegistry {
            params: Vec::new(),
            buffers: Vec::new(),
            index: HashMap::new(),
            buffer_index: HashMap::new(),
        }
    }
}

impl<T: Element> ParamRegistry<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(
        &mut self,
        name: impl Into<String>,
        tensor: Tensor<T>,
        apply_weight_decay: bool,
    ) -> Result<Tensor<T>> {
        let name = name.into();
        if self.index.contains_key(&name) || self.buffer_index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        if !tensor.requires_grad() || !tensor.is_leaf() {
            return Err(Error::Config(format!(
                "parameter {name} must be a grad-requiring leaf"
            )));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(ParamEntry {
            name,
            tensor: tensor.clone(),
            apply_weight_decay,
        });
        Ok(tensor)
    }

    pub fn register_buffer(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<Tensor<T>> {
        let name = name.into();
        if self.index.contains_key(&name) || self.buffer_index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate buffer name {name}")));
        }
        self.buffer_index.insert(name.clone(), self.buffers.len());
        self.buffers.push((name, tensor.clone()));
        Ok(tensor)
    }

    pub fn params(&self) -> &[ParamEntry<T>] {
        &self.params
    }

    pub fn buffers(&self) -> &[(String, Tensor<T>)] {
        &self.buffers
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.params[i].tensor)
    }

    pub fn buffer(&self, name: &str) -> Option<&Tensor<T>> {
        self.buffer_index.get(name).map(|&i| &self.buffers[i].1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Trainable scalars under a name prefix.
    pub fn parameter_count_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.tensor.numel())
            .sum()
    }

    pub fn zero_grad(&self) {
        for p in &self.params {
            p.tensor.zero_grad();
        }
    }

    /// Copy of every parameter and buffer value, in registry order.
    pub fn snapshot(&self) -> Vec<(String, Vec<T>)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.tensor.to_vec()))
            .chain(self.buffers.iter().map(|(n, t)| (n.clone(), t.to_vec())))
            .collect()
    }
}
