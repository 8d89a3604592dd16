use std::collections::BTreeMap;

use super::tensor::Tensor;
use super::{AutodiffError, Result};

/// A named trainable tensor. Names are unique within a store and follow a
/// dotted-path convention ("lm.embed", "mix.layer1.weight").
#[derive(Debug, Clone)]
pub struct Parameter {
    name: String,
    tensor: Tensor,
}

impl Parameter {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn tensor_mut(&mut self) -> &mut Tensor {
        &mut self.tensor
    }
}

/// Ordered collection of model parameters. Registration order is the
/// model-construction order; checkpoint serialization sorts by name so the
/// on-disk order is stable regardless of how a model was assembled.
#[derive(Debug, Default, Clone)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, tensor: Tensor) -> Result<usize> {
        if self.by_name.contains_key(name) {
            return Err(AutodiffError::Contract(format!(
                "duplicate parameter name {name:?}"
            )));
        }
        let idx = self.params.len();
        self.params.push(Parameter {
            name: name.to_string(),
            tensor: tensor.with_requires_grad(true),
        });
        self.by_name.insert(name.to_string(), idx);
        Ok(idx)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Parameter {
        &self.params[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Parameter {
        &mut self.params[idx]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.index_of(name).map(|i| self.get(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    /// Indices sorted by parameter name; the checkpoint record order.
    pub fn sorted_indices(&self) -> Vec<usize> {
        self.by_name.values().copied().collect()
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.iter_mut() {
            p.tensor.zero_grad();
        }
    }

    pub fn total_values(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new();
        store.register("w", Tensor::zeros(vec![2])).unwrap();
        assert!(store.register("w", Tensor::zeros(vec![2])).is_err());
    }

    #[test]
    fn sorted_indices_follow_name_order() {
        let mut store = ParamStore::new();
        store.register("b", Tensor::zeros(vec![1])).unwrap();
        store.register("a", Tensor::zeros(vec![1])).unwrap();
        let order: Vec<&str> = store
            .sorted_indices()
            .into_iter()
            .map(|i| store.get(i).name())
            .collect();
        assert_eq!(order, vec!["a", "b"]);
    }
}
