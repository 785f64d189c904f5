use crate::error::{AutodiffError, Result};
use crate::real::Real;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Ordered, named collection of trainable tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T: Real = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Append a parameter and return its position.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name)
            .ok_or_else(|| AutodiffError::Checkpoint(format!("missing parameter {name:?}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::<T>::len).sum()
    }

    /// Put every parameter on the tape as a trainable leaf.
    pub fn attach(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.param(t.clone())).collect()
    }

    /// Put every parameter on the tape as a constant.
    pub fn attach_frozen(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.constant(t.clone())).collect()
    }

    /// Gradients for the vars returned by [`ParamSet::attach`], zero-filled.
    pub fn collect_grads(&self, grads: &Gradients<T>, vars: &[Var]) -> Vec<Tensor<T>> {
        vars.iter()
            .zip(&self.tensors)
            .map(|(&v, t)| grads.get_or_zeros(v, t.shape()))
            .collect()
    }

    /// Merge another set into this one, prefixing its names.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParamSet<T>) {
        for (n, t) in other.iter() {
            self.insert(format!("{prefix}{n}"), t.clone());
        }
    }

    /// Parameters whose name starts with `prefix`, with the prefix stripped.
    pub fn with_prefix(&self, prefix: &str) -> ParamSet<T> {
        let mut out = ParamSet::new();
        for (n, t) in self.iter() {
            if let Some(rest) = n.strip_prefix(prefix) {
                out.insert(rest, t.clone());
            }
        }
        out
    }
}
