use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named model tensor with its trainable flag and gradient slot.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    shape: Vec<usize>,
    pub value: Tensor,
    pub trainable: bool,
    /// Populated by the trainer; same shape as `value` when present.
    pub grad: Option<Tensor>,
}

impl Parameter {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_bias(&self) -> bool {
        self.name.ends_with(".bias")
    }
}

/// Every tensor of a model, base and attached, in registration order.
///
/// A *shape-only* store records names and shapes without allocating
/// payloads; it supports accounting but not forward passes.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, usize>,
    shape_only: bool,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn shape_only() -> Self {
        Self {
            shape_only: true,
            ..Self::default()
        }
    }

    pub fn is_shape_only(&self) -> bool {
        self.shape_only
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        let shape = value.shape().to_vec();
        let value = if self.shape_only {
            Tensor::zeros(&[0])
        } else {
            value
        };
        self.push(name, shape, value, trainable)
    }

    /// Registers a tensor by shape only; in a live store it is zero-filled.
    pub fn insert_shape(&mut self, name: impl Into<String>, shape: &[usize], trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        let value = if self.shape_only {
            Tensor::zeros(&[0])
        } else {
            Tensor::zeros(shape)
        };
        self.push(name, shape.to_vec(), value, trainable)
    }

    fn push(&mut self, name: String, shape: Vec<usize>, value: Tensor, trainable: bool) -> Result<ParamId> {
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            shape,
            value,
            trainable,
            grad: None,
        });
        Ok(ParamId(id))
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.by_name
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn by_name(&self, name: &str) -> Result<&Parameter> {
        Ok(self.get(self.id(name)?))
    }

    /// Overwrites a tensor's value, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.shape != value.shape() {
            return Err(Error::dim("ParamStore::set", &p.shape, value.shape()));
        }
        p.value = value;
        Ok(())
    }

    /// Drops a tensor. Ids of later tensors shift down by one.
    pub fn remove(&mut self, name: &str) -> Result<Parameter> {
        let idx = self.id(name)?.0;
        let p = self.params.remove(idx);
        self.by_name = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), i))
            .collect();
        Ok(p)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for p in &mut self.params {
            p.trainable = trainable;
        }
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect()
    }

    pub fn total_numel(&self) -> usize {
        self.params.iter().map(Parameter::numel).sum()
    }

    pub fn trainable_numel(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(Parameter::numel).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_duplicate_names() {
        let mut s = ParamStore::new();
        s.insert("a.weight", Tensor::zeros(&[2, 2]), false).unwrap();
        assert!(s.insert("a.weight", Tensor::zeros(&[1]), true).is_err());
    }

    #[test]
    fn shape_only_store_counts_without_allocating() {
        let mut s = ParamStore::shape_only();
        let id = s.insert_shape("big.weight", &[1000, 1000], true).unwrap();
        assert_eq!(s.get(id).numel(), 1_000_000);
        assert_eq!(s.get(id).value.numel(), 0);
        assert_eq!(s.trainable_numel(), 1_000_000);
    }

    #[test]
    fn set_checks_shape() {
        let mut s = ParamStore::new();
        let id = s.insert("w", Tensor::zeros(&[2, 3]), true).unwrap();
        assert!(s.set(id, Tensor::zeros(&[3, 2])).is_err());
        assert!(s.set(id, Tensor::ones(&[2, 3])).is_ok());
    }
}
