//! Named parameter storage with deterministic (lexicographic) iteration.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use alloc::format;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// How a stored tensor participates in training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Convolution, dense, or attention weight: trained, L2-decayed.
    Weight,
    /// Bias vector: trained, no decay.
    Bias,
    /// Batch-norm scale/shift: trained, no decay.
    Norm,
    /// Running statistic: not trained, saved in checkpoints.
    Buffer,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::Buffer)
    }

    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Weight)
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub value: Tensor<T>,
    pub kind: ParamKind,
}

/// Map from dotted path names (`"block1.conv5.weight"`) to tensors.
#[derive(Clone, Debug, Default)]
pub struct ParameterStore<T> {
    entries: BTreeMap<String, ParamEntry<T>>,
}

impl<T: Real> ParameterStore<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>, kind: ParamKind) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::Invalid(format!("duplicate parameter name {name:?}")));
        }
        self.entries.insert(
            String::from(name),
            ParamEntry { value, kind },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&ParamEntry<T>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("unknown parameter {name:?}")))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(&self.get(name)?.value)
    }

    pub fn set_value(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Invalid(format!("unknown parameter {name:?}")))?;
        if entry.value.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "parameter {name:?} has shape {:?}, got {:?}",
                entry.value.shape(),
                value.shape()
            )));
        }
        entry.value = value;
        Ok(())
    }

    /// Lexicographic iteration over all entries.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of trainable scalar parameters.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .values()
            .filter(|e| e.kind.trainable())
            .map(|e| e.value.numel())
            .sum()
    }

    /// Overwrite a flat element of a trainable parameter (gradient checking).
    pub fn perturb(&mut self, name: &str, index: usize, delta: T) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Invalid(format!("unknown parameter {name:?}")))?;
        if index >= entry.value.numel() {
            return Err(Error::Invalid(format!(
                "index {index} out of range for {name:?}"
            )));
        }
        let mut data = entry.value.to_vec();
        data[index] = data[index] + delta;
        entry.value = Tensor::new(entry.value.shape().to_vec(), data)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn names_iterate_lexicographically() {
        let mut store = ParameterStore::<f32>::new();
        store
            .insert("mlp.fc1.weight", Tensor::zeros(vec![2, 2]), ParamKind::Weight)
            .unwrap();
        store
            .insert("block1.conv5.weight", Tensor::zeros(vec![3]), ParamKind::Weight)
            .unwrap();
        store
            .insert("block1.bn.gamma", Tensor::ones(vec![3]), ParamKind::Norm)
            .unwrap();
        let names = store.names();
        assert_eq!(
            names,
            vec!["block1.bn.gamma", "block1.conv5.weight", "mlp.fc1.weight"]
        );
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParameterStore::<f32>::new();
        store.insert("w", Tensor::zeros(vec![1]), ParamKind::Weight).unwrap();
        assert!(store.insert("w", Tensor::zeros(vec![1]), ParamKind::Weight).is_err());
    }

    #[test]
    fn trainable_count_skips_buffers() {
        let mut store = ParameterStore::<f32>::new();
        store.insert("w", Tensor::zeros(vec![4]), ParamKind::Weight).unwrap();
        store
            .insert("rm", Tensor::zeros(vec![8]), ParamKind::Buffer)
            .unwrap();
        assert_eq!(store.trainable_count(), 4);
    }
}
