use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Tensor;
use crate::error::{Error, Result};

/// Role of a trainable tensor. Only `Weight` tensors receive the L1 penalty.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Gain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
}

/// Ordered, named collection of trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor) -> ParamId {
        self.params.push(Param { name: name.into(), kind, value });
        ParamId(self.params.len() - 1)
    }

    /// Adds a weight drawn from `N(0, std²)`.
    pub fn add_normal(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        std: f64,
        rng: &mut impl Rng,
    ) -> ParamId {
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let value = Tensor::from_fn(shape, |_| normal.sample(rng));
        self.add(name, ParamKind::Weight, value)
    }

    pub fn add_constant(
        &mut self,
        name: impl Into<String>,
        kind: ParamKind,
        shape: Vec<usize>,
        value: f64,
    ) -> ParamId {
        self.add(name, kind, Tensor::from_fn(shape, |_| value))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn named_tensors(&self) -> Vec<(&str, &Tensor)> {
        self.params.iter().map(|p| (p.name.as_str(), &p.value)).collect()
    }

    /// Replaces every tensor's values with the same-named entry in `tensors`.
    /// Names and shapes must match exactly.
    pub fn load_named(&mut self, tensors: Vec<(String, Tensor)>) -> Result<()> {
        if tensors.len() != self.params.len() {
            return Err(Error::Format {
                what: "checkpoint",
                detail: format!("expected {} tensors, found {}", self.params.len(), tensors.len()),
            });
        }
        for (name, tensor) in tensors {
            let id = self.find(&name).ok_or_else(|| Error::Format {
                what: "checkpoint",
                detail: format!("unexpected tensor {name:?}"),
            })?;
            let slot = &mut self.params[id.0].value;
            if slot.shape() != tensor.shape() {
                return Err(Error::Format {
                    what: "checkpoint",
                    detail: format!(
                        "tensor {name:?} has shape {:?}, model expects {:?}",
                        tensor.shape(),
                        slot.shape()
                    ),
                });
            }
            *slot = tensor;
        }
        Ok(())
    }
}

/// Per-parameter gradients produced by a backward pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn empty(store: &ParamStore) -> Self {
        Self { grads: vec![None; store.len()] }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient buffer for `id`, created as zeros of the parameter's shape on first use.
    pub fn entry(&mut self, store: &ParamStore, id: ParamId) -> &mut Tensor {
        let slot = &mut self.grads[id.0];
        slot.get_or_insert_with(|| Tensor::zeros(store.value(id).shape().to_vec()))
    }

    pub(crate) fn accumulate(&mut self, store: &ParamStore, id: ParamId, grad: &[f64]) {
        let buf = self.entry(store, id);
        for (g, d) in buf.data_mut().iter_mut().zip(grad) {
            *g += d;
        }
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|x| *x *= factor);
        }
    }
}
