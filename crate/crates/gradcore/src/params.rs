use std::collections::BTreeMap;

use crate::error::{GradError, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Trainable parameters keyed by path, with a gradient slot per parameter.
///
/// Iteration is lexicographic by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T> {
    values: BTreeMap<String, Tensor<T>>,
    grads: BTreeMap<String, Vec<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            values: BTreeMap::new(),
            grads: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.values.contains_key(&name) {
            return Err(GradError::DuplicateParam(name));
        }
        self.grads.insert(name.clone(), vec![T::zero(); value.numel()]);
        self.values.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.values
            .get(name)
            .ok_or_else(|| GradError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.values
            .get_mut(name)
            .ok_or_else(|| GradError::UnknownParam(name.to_string()))
    }

    pub fn grad(&self, name: &str) -> Result<&[T]> {
        self.grads
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| GradError::UnknownParam(name.to_string()))
    }

    pub fn grad_mut(&mut self, name: &str) -> Result<&mut [T]> {
        self.grads
            .get_mut(name)
            .map(Vec::as_mut_slice)
            .ok_or_else(|| GradError::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.values.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Parameter value and gradient side by side, for optimizers.
    pub fn iter_mut_with_grads(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>, &[T])> {
        self.values
            .iter_mut()
            .zip(self.grads.values())
            .map(|((k, v), g)| (k.as_str(), v, g.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.values.values().map(Tensor::numel).sum()
    }

    pub fn zero_grads(&mut self) {
        for g in self.grads.values_mut() {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn accumulate_grad(&mut self, name: &str, grad: &[T]) -> Result<()> {
        let slot = self.grad_mut(name)?;
        if slot.len() != grad.len() {
            return Err(GradError::Invalid(format!(
                "gradient for `{name}` has {} elements, parameter has {}",
                grad.len(),
                slot.len()
            )));
        }
        for (s, g) in slot.iter_mut().zip(grad) {
            *s += *g;
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            values: self.values.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            grads: self
                .grads
                .iter()
                .map(|(k, g)| (k.clone(), g.iter().map(|x| U::of(x.f64())).collect()))
                .collect(),
        }
    }
}

/// Exponential-moving-average batch statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    /// Number of train-mode updates folded into the averages.
    pub updates: u64,
}

impl<T: Real> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
            updates: 0,
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn cast<U: Real>(&self) -> RunningStats<U> {
        RunningStats {
            mean: self.mean.iter().map(|x| U::of(x.f64())).collect(),
            var: self.var.iter().map(|x| U::of(x.f64())).collect(),
            updates: self.updates,
        }
    }
}

/// Batch-norm running statistics keyed by layer path.
pub type BnStates<T> = BTreeMap<String, RunningStats<T>>;
