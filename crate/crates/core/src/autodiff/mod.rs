//! Dense reverse-mode automatic differentiation.
//!
//! A [`Graph`] records primitive applications over named leaves. Leaves are
//! resolved at evaluation time through a [`Bindings`] source, which lets the
//! same recorded graph be re-evaluated under perturbed parameters (see
//! [`finite_difference_check`]).

mod gradcheck;
mod graph;

use std::collections::BTreeMap;

pub use gradcheck::{finite_difference_check, GradCheckConfig, GradCheckReport, LeafReport};
pub use graph::{Gradients, Graph, NodeId, Op};

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Resolves leaf names to values during a forward pass.
pub trait Bindings<S: Scalar> {
    fn lookup(&self, name: &str) -> Option<&Tensor<S>>;
}

/// Ordered name to tensor map. Iteration order is lexicographic, which keeps
/// serialization and optimizer sweeps deterministic.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<S> {
    params: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self { params: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<S>) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<S>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<S>)> {
        self.params.iter_mut()
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

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn bits_eq(&self, other: &Self) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|((ka, va), (kb, vb))| ka == kb && va.bits_eq(vb))
    }

    /// Copy with every name prefixed by `prefix`.
    pub fn prefixed(&self, prefix: &str) -> Self {
        Self {
            params: self.params.iter().map(|(k, v)| (format!("{prefix}{k}"), v.clone())).collect(),
        }
    }

    /// Entries whose name starts with `prefix`, with the prefix removed.
    pub fn strip_prefix(&self, prefix: &str) -> Self {
        Self {
            params: self
                .params
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
                .collect(),
        }
    }

    pub fn extend(&mut self, other: ParamStore<S>) {
        self.params.extend(other.params);
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore { params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }
}

impl<S: Scalar> Bindings<S> for ParamStore<S> {
    fn lookup(&self, name: &str) -> Option<&Tensor<S>> {
        self.params.get(name)
    }
}

impl<S: Scalar> Bindings<S> for BTreeMap<String, Tensor<S>> {
    fn lookup(&self, name: &str) -> Option<&Tensor<S>> {
        self.get(name)
    }
}

impl<S: Scalar> FromIterator<(String, Tensor<S>)> for ParamStore<S> {
    fn from_iter<I: IntoIterator<Item = (String, Tensor<S>)>>(iter: I) -> Self {
        Self { params: iter.into_iter().collect() }
    }
}
