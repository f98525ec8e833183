//! Named trainable arrays with per-entry freeze flags.

use std::collections::HashMap;

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub frozen: bool,
    pub grad: Tensor<T>,
}

/// Insertion-ordered parameter table. Names are unique.
#[derive(Debug, Clone, Default)]
pub struct ParameterStore<T> {
    entries: Vec<ParamEntry<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParameterStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, frozen: bool) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter {name:?}")));
        }
        let grad = Tensor::zeros(value.shape());
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry {
            name,
            value,
            frozen,
            grad,
        });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry<T>> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamEntry<T>> {
        self.index.get(name).map(|&i| &mut self.entries[i])
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name)
            .map(|e| &e.value)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    /// Replaces a value, keeping the shape contract.
    pub fn set_value(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let e = self
            .get_mut(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))?;
        if e.value.shape() != value.shape() {
            return Err(Error::shape(
                "set_value",
                format!("{name}: {:?} vs {:?}", e.value.shape(), value.shape()),
            ));
        }
        e.value = value;
        Ok(())
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) -> Result<()> {
        self.get_mut(name)
            .map(|e| e.frozen = frozen)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamEntry<T>> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamEntry<T>> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_params(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    pub fn num_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| !e.frozen)
            .map(|e| e.value.numel())
            .sum()
    }

    /// Parameter count of every entry whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.name.starts_with(prefix))
            .map(|e| e.value.numel())
            .sum()
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Adds `weight *` every parameter gradient recorded in `graph`.
    pub fn accumulate_grads(&mut self, graph: &Graph<T>, weight: T) {
        for (name, var) in graph.param_vars() {
            let (Some(&i), Some(g)) = (self.index.get(name), graph.grad(var)) else {
                continue;
            };
            for (acc, &v) in self.entries[i].grad.data_mut().iter_mut().zip(g.data()) {
                *acc += weight * v;
            }
        }
    }

    /// Same layout, different scalar type.
    pub fn cast<U: Scalar>(&self) -> ParameterStore<U> {
        ParameterStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    frozen: e.frozen,
                    grad: e.grad.cast(),
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParameterStore::<f32>::new();
        s.insert("a", Tensor::zeros(&[2]), false).unwrap();
        assert!(s.insert("a", Tensor::zeros(&[3]), false).is_err());
        assert_eq!(s.num_params(), 2);
    }

    #[test]
    fn shared_parameter_gets_one_accumulated_gradient() {
        let mut s = ParameterStore::<f64>::new();
        s.insert("w", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), false)
            .unwrap();
        let mut g = Graph::new();
        let w1 = g.param(&s, "w").unwrap();
        let w2 = g.param(&s, "w").unwrap();
        assert_eq!(w1, w2);
        let p = g.mul(w1, w2).unwrap();
        let l = g.reduce_sum(p, None).unwrap();
        g.backward(l).unwrap();
        s.accumulate_grads(&g, 1.0);
        assert_eq!(s.get("w").unwrap().grad.data(), &[2.0, 4.0]);
    }
}
