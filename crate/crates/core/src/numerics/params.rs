use std::collections::BTreeMap;

use super::{NumError, Scalar, Tensor};

/// A named model parameter and its trainability flag.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub trainable: bool,
}

/// Ordered collection of named parameters. Iteration order is the name
/// order, which keeps every sweep over parameters deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) {
        self.params.insert(name.into(), Param { value, trainable });
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.params.get_mut(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<T>, NumError> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| NumError::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<T>)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar values.
    pub fn numel(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    pub fn numel_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, p)| p.value.numel())
            .sum()
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        self.params.values_mut().for_each(|p| p.trainable = trainable);
    }

    /// Sets each parameter's flag from `rule(name)`.
    pub fn set_trainable_by(&mut self, rule: impl Fn(&str) -> bool) {
        for (name, p) in self.params.iter_mut() {
            p.trainable = rule(name);
        }
    }

    /// Moves every parameter of `other` into this store, replacing duplicates.
    pub fn merge(&mut self, other: ParamStore<T>) {
        self.params.extend(other.params);
    }

    /// Parameters whose names start with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore<T> {
        Self {
            params: self
                .params
                .iter()
                .filter(|(n, _)| n.starts_with(prefix))
                .map(|(n, p)| (n.clone(), p.clone()))
                .collect(),
        }
    }

    pub fn remove_prefix(&mut self, prefix: &str) {
        self.params.retain(|n, _| !n.starts_with(prefix));
    }

    /// Overwrites values (and flags) of an instantiated model from `src`.
    /// Every parameter under `prefix` must be present in `src` with the same
    /// shape.
    pub fn load_from(&mut self, src: &ParamStore<T>, prefix: &str) -> Result<(), NumError> {
        for (name, p) in self.params.iter_mut().filter(|(n, _)| n.starts_with(prefix)) {
            let s = src.get(name).ok_or_else(|| NumError::MissingParam(name.clone()))?;
            if s.value.shape() != p.value.shape() {
                return Err(NumError::Shape(format!(
                    "parameter {name}: checkpoint shape {:?}, model shape {:?}",
                    s.value.shape(),
                    p.value.shape()
                )));
            }
            *p = s.clone();
        }
        Ok(())
    }
}
