use std::collections::BTreeMap;
use std::sync::Arc;

use crate::{Scalar, Tensor};

/// Handle into a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Arc<Tensor<T>>,
    pub trainable: bool,
}

/// Flat, ordered collection of named parameter tensors.
///
/// Modules keep [`ParamId`]s; the store owns the values so that forward
/// passes on several threads can share one read-only store.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter name {name}");
        self.params.push(Param { name, value: Arc::new(value), trainable: true });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Arc<Tensor<T>> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.params[id.0].value)
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor<T>) {
        let slot = &mut self.params[id.0];
        assert_eq!(slot.value.shape(), value.shape(), "shape change for {}", slot.name);
        slot.value = Arc::new(value);
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    /// Sets the trainable flag on every parameter whose name starts with `prefix`.
    /// Returns how many parameters matched.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) -> usize {
        let mut n = 0;
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.trainable = trainable;
            n += 1;
        }
        n
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Copies every tensor whose name exists in `other` with the same shape.
    /// Returns the names that were copied.
    pub fn load_matching(&mut self, other: &ParamStore<T>) -> Vec<String> {
        let mut copied = Vec::new();
        for p in &mut self.params {
            if let Some(id) = other.find(&p.name) {
                let src = other.value(id);
                if src.shape() == p.value.shape() {
                    p.value = Arc::clone(src);
                    copied.push(p.name.clone());
                }
            }
        }
        copied
    }
}

/// Parameter gradients, keyed by id in ascending order.
#[derive(Clone, Debug, Default)]
pub struct Grads<T> {
    map: BTreeMap<ParamId, Tensor<T>>,
}

impl<T: Scalar> Grads<T> {
    pub fn new() -> Self {
        Self { map: BTreeMap::new() }
    }

    pub fn accumulate(&mut self, id: ParamId, grad: Tensor<T>) {
        match self.map.get_mut(&id) {
            Some(g) => g.add_assign(&grad),
            None => {
                self.map.insert(id, grad);
            }
        }
    }

    /// Adds every entry of `other` into `self`.
    pub fn merge(&mut self, other: Grads<T>) {
        for (id, g) in other.map {
            self.accumulate(id, g);
        }
    }

    pub fn scale(&mut self, s: T) {
        for g in self.map.values_mut() {
            g.scale_in_place(s);
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.map.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.map.iter().map(|(&id, g)| (id, g))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.map.values().all(|g| g.is_finite())
    }

    pub fn global_norm(&self) -> T {
        self.map
            .values()
            .flat_map(|g| g.data().iter())
            .fold(T::zero(), |acc, &x| acc + x * x)
            .sqrt()
    }
}
