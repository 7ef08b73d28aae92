use std::collections::HashMap;

use super::graph::{Gradients, Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

/// Per-parameter gradients aligned with a [`ParamStore`]. A missing entry
/// means the parameter did not influence the loss; its gradient is zero.
#[derive(Clone, Debug)]
pub struct ParamGrads {
    pub grads: Vec<Option<Vec<f32>>>,
}

impl ParamGrads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: vec![None; store.len()],
        }
    }

    /// Squared L2 norm over every present gradient.
    pub fn sq_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .map(|&v| f64::from(v) * f64::from(v))
            .sum()
    }

    pub fn scale(&mut self, s: f32) {
        for g in self.grads.iter_mut().flatten() {
            g.iter_mut().for_each(|v| *v *= s);
        }
    }

    /// Gradient of parameter `i` as a dense vector (zeros when absent).
    pub fn dense(&self, i: usize, len: usize) -> Vec<f32> {
        self.grads[i].clone().unwrap_or_else(|| vec![0.0; len])
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> usize {
        let name = name.into();
        let i = self.tensors.len();
        assert!(
            self.index.insert(name.clone(), i).is_none(),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.tensors.push(tensor);
        i
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.tensors.iter_mut()
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Puts every parameter on `g` as a leaf.
    pub fn bind(&self, g: &mut Graph, requires_grad: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| g.leaf(t.clone(), requires_grad))
            .collect()
    }

    /// Collects per-parameter gradients for leaves created by [`bind`].
    ///
    /// [`bind`]: ParamStore::bind
    pub fn collect_grads(&self, vars: &[Var], grads: &mut Gradients) -> ParamGrads {
        ParamGrads {
            grads: vars.iter().map(|&v| grads.take(v)).collect(),
        }
    }

    /// Replaces every tensor with the one of the same name in `other`,
    /// requiring identical names and shapes.
    pub fn copy_from(&mut self, other: &ParamStore) -> Result<()> {
        self.check_same_layout(other)?;
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    pub fn check_same_layout(&self, other: &ParamStore) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Config("parameter names differ".into()));
        }
        for (i, (a, b)) in self.tensors.iter().zip(&other.tensors).enumerate() {
            if a.shape() != b.shape() {
                return Err(Error::Config(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    self.names[i],
                    b.shape(),
                    a.shape()
                )));
            }
        }
        Ok(())
    }
}
