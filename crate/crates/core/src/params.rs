use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::float::Float;
use crate::graph::{Gradients, Graph};
use crate::tensor::Tensor;

/// One learnable tensor with its gradient and adaptive-moment state.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    pub requires_grad: bool,
    pub(crate) m: Vec<T>,
    pub(crate) v: Vec<T>,
    pub(crate) step: u64,
}

impl<T: Float> Param<T> {
    fn new(value: Tensor<T>) -> Self {
        let n = value.numel();
        Self {
            value,
            grad: None,
            requires_grad: true,
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// Named parameters addressed by dotted path, iterated in sorted order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Param<T>>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
        }
    }

    /// Inserts or replaces a parameter, resetting its optimizer state.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.params.insert(name.into(), Param::new(value));
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Param<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param<T>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name).map(|p| &p.value)
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.get_mut(name).map(|p| &mut p.value)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    /// Marks every parameter whose name starts with `prefix` as trainable or frozen.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for (name, p) in self.params.iter_mut() {
            if name.starts_with(prefix) {
                p.requires_grad = trainable;
            }
        }
    }

    /// Sets every gradient to a zero buffer.
    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            match &mut p.grad {
                Some(g) => g.data_mut().iter_mut().for_each(|x| *x = T::zero()),
                None => p.grad = Some(Tensor::zeros(p.value.shape())),
            }
        }
    }

    pub fn clear_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad = None;
        }
    }

    /// Adds the gradients of every parameter leaf of `graph` into the store.
    /// Trainable parameters that the graph never touched receive zeros.
    pub fn accumulate(&mut self, graph: &Graph<T>, grads: &Gradients<T>) -> Result<()> {
        for p in self.params.values_mut() {
            if p.grad.is_none() {
                p.grad = Some(Tensor::zeros(p.value.shape()));
            }
        }
        for (name, var) in graph.param_vars() {
            let p = self.get_mut(name)?;
            if !p.requires_grad {
                continue;
            }
            if let Some(g) = grads.get(*var) {
                let dst = p.grad.as_mut().expect("grad initialised above");
                for (d, &s) in dst.data_mut().iter_mut().zip(g) {
                    *d += s;
                }
            }
        }
        Ok(())
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for (name, p) in self.iter() {
            out.insert(name, p.value.cast());
            out.get_mut(name).unwrap().requires_grad = p.requires_grad;
        }
        out
    }
}
