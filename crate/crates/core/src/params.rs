//! Named parameter storage.
//!
//! Parameters live in a [`ParamStore`] in declaration order, which is also
//! the order they are written to checkpoints. A forward pass binds the whole
//! store onto a tape with [`ParamStore::bind`] and addresses individual
//! tensors through their [`ParamId`].

use std::ops::Index;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Buffers (e.g. normalization running statistics) are stored and
    /// checkpointed but never updated by the optimizer.
    pub trainable: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.push(name.into(), value, true)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.push(name.into(), value, false)
    }

    fn push(&mut self, name: String, value: Tensor, trainable: bool) -> ParamId {
        debug_assert!(
            self.entries.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        self.entries.push(Param { name, value, trainable });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &Param {
        &self.entries[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.entries.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.entries.iter().map(|p| p.value.clone()).collect()
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.entries
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    /// Trainable scalars whose parameter name starts with `prefix`.
    pub fn num_scalars_with_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|p| p.trainable && p.name.starts_with(prefix))
            .map(|p| p.value.numel())
            .sum()
    }

    /// Records every parameter on `tape`. Buffers are bound as constants.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        let vars = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, p)| {
                if p.trainable {
                    tape.param(p.value.clone(), ParamId(i))
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect();
        Bound { vars }
    }
}

/// A [`ParamStore`] recorded on a tape.
#[derive(Clone)]
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    /// Wraps vars that line up one-to-one with a store's declaration order.
    pub fn from_vars(vars: Vec<Var<'t>>) -> Self {
        Self { vars }
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }
}

impl<'t> Index<ParamId> for Bound<'t> {
    type Output = Var<'t>;

    fn index(&self, id: ParamId) -> &Var<'t> {
        &self.vars[id.0]
    }
}

/// Uniform initialization in `[-bound, bound]`.
pub fn uniform<R: Rng + ?Sized>(rng: &mut R, shape: impl Into<Vec<usize>>, bound: f64) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for x in t.data_mut() {
        *x = rng.random_range(-bound..=bound);
    }
    t
}
