use std::collections::BTreeMap;

use ndarray::{ArrayD, IxDyn};

use crate::NnError;

/// N-dimensional row-major array of `f64` with an optional gradient slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    value: ArrayD<f64>,
    grad: Option<ArrayD<f64>>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            value: ArrayD::zeros(IxDyn(shape)),
            grad: None,
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self, NnError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(NnError::ShapeMismatch {
                op: "Tensor::from_vec",
                left: shape.to_vec(),
                right: vec![data.len()],
            });
        }
        let value = ArrayD::from_shape_vec(IxDyn(shape), data)
            .map_err(|e| NnError::Invalid(e.to_string()))?;
        Ok(Self { value, grad: None })
    }

    pub fn from_array(value: ArrayD<f64>) -> Self {
        let value = if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().into_owned()
        };
        Self { value, grad: None }
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn value(&self) -> &ArrayD<f64> {
        &self.value
    }

    pub fn value_mut(&mut self) -> &mut ArrayD<f64> {
        &mut self.value
    }

    /// Row-major view of the values.
    pub fn data(&self) -> &[f64] {
        self.value
            .as_slice()
            .expect("tensors are kept in standard layout")
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        self.value
            .as_slice_mut()
            .expect("tensors are kept in standard layout")
    }

    pub fn grad(&self) -> Option<&ArrayD<f64>> {
        self.grad.as_ref()
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &ArrayD<f64>) -> Result<(), NnError> {
        if g.shape() != self.value.shape() {
            return Err(NnError::ShapeMismatch {
                op: "accumulate_grad",
                left: self.value.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
        match &mut self.grad {
            Some(buf) => *buf += g,
            None => self.grad = Some(g.clone()),
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn is_finite(&self) -> bool {
        self.value.iter().all(|v| v.is_finite())
    }
}

/// Named collection of trainable tensors.
///
/// Iteration order is lexicographic by name, which fixes both the checkpoint
/// layout and the order in which optimizers visit parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Option<Tensor> {
        self.tensors.insert(name.into(), tensor)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, NnError> {
        self.tensors
            .get(name)
            .ok_or_else(|| NnError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor, NnError> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| NnError::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn zero_grad(&mut self) {
        for t in self.tensors.values_mut() {
            t.zero_grad();
        }
    }

    /// Copies every tensor whose name starts with `prefix` from `other`.
    pub fn copy_prefix_from(&mut self, other: &ParamSet, prefix: &str) -> usize {
        let mut copied = 0;
        for (name, t) in other.iter().filter(|(n, _)| n.starts_with(prefix)) {
            let mut t = t.clone();
            t.zero_grad();
            self.tensors.insert(name.to_string(), t);
            copied += 1;
        }
        copied
    }
}
