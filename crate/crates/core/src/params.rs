//! Named parameter storage shared by the blocks, the model and the optimizer.

use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, ParamId, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: Tensor<T>,
}

/// Ordered list of named tensors. A [`ParamId`] is an index into it.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, kind: ParamKind, tensor: Tensor<T>) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            kind,
            tensor,
        });
        ParamId(self.entries.len() - 1)
    }

    /// Adds a tensor drawn from `U(-bound, bound)` with `bound = 1/sqrt(fan_in)`.
    pub fn push_init<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        kind: ParamKind,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> Result<ParamId> {
        let bound = init_bound(fan_in);
        let t = Tensor::rand_uniform(shape, -bound, bound, rng)?;
        Ok(self.push(name, kind, t))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].tensor
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<T>)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    /// Total scalar count, optionally excluding biases.
    pub fn count(&self, include_bias: bool) -> usize {
        self.entries
            .iter()
            .filter(|e| include_bias || e.kind == ParamKind::Weight)
            .map(|e| e.tensor.len())
            .sum()
    }

    /// Registers every tensor as a parameter leaf of `g`.
    pub fn bind(&self, g: &Graph<T>) -> Result<BoundParams<T>> {
        let vars = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| {
                if g.is_recording() {
                    g.param(ParamId(i), e.tensor.clone())
                } else {
                    g.try_input(e.tensor.clone())
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(BoundParams { vars })
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    kind: e.kind,
                    tensor: e.tensor.cast(),
                })
                .collect(),
        }
    }

    pub fn fill(&mut self, value: T) {
        for e in &mut self.entries {
            e.tensor.data_mut().fill(value);
        }
    }
}

/// Graph vars for a parameter store, index-aligned with its [`ParamId`]s.
pub struct BoundParams<T> {
    vars: Vec<Var<T>>,
}

impl<T: Scalar> BoundParams<T> {
    pub fn var(&self, id: ParamId) -> &Var<T> {
        &self.vars[id.0]
    }
}

pub(crate) fn init_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}
