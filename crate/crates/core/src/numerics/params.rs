use std::cell::RefCell;

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use super::{Gradients, Tape, Tensor, Var};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors.
///
/// The insertion order is the serialization order of checkpoints.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Glorot-uniform weight matrix.
    pub fn add_glorot<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> ParamId {
        let limit = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit);
        let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
        self.add(name, Tensor::matrix(rows, cols, data))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub(crate) fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub(crate) fn names(&self) -> &[String] {
        &self.names
    }

    /// Zero tensors matching every parameter shape.
    pub fn zeros_like(&self) -> Vec<Tensor> {
        self.values
            .iter()
            .map(|t| Tensor::zeros(t.rows(), t.cols()))
            .collect()
    }
}

/// Lazily binds store parameters to leaves of one tape.
///
/// Parameters are copied onto the tape the first time they are used in a
/// forward pass; [`Session::collect`] maps leaf gradients back to store
/// order afterwards.
pub struct Session<'t, 'p> {
    tape: &'t Tape,
    store: &'p ParamStore,
    bound: RefCell<Vec<Option<Var<'t>>>>,
}

impl<'t, 'p> Session<'t, 'p> {
    pub fn new(tape: &'t Tape, store: &'p ParamStore) -> Self {
        Session {
            tape,
            store,
            bound: RefCell::new(vec![None; store.len()]),
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn param(&self, id: ParamId) -> Var<'t> {
        let mut bound = self.bound.borrow_mut();
        *bound[id.0].get_or_insert_with(|| self.tape.param(self.store.get(id).clone()))
    }

    pub fn constant(&self, t: Tensor) -> Var<'t> {
        self.tape.constant(t)
    }

    /// Gradients in store order; parameters unused by the loss get zeros.
    pub fn collect(&self, grads: &Gradients) -> Vec<Tensor> {
        let bound = self.bound.borrow();
        self.store
            .ids()
            .map(|id| {
                bound[id.0]
                    .and_then(|v| grads.get_id(v.id()).cloned())
                    .unwrap_or_else(|| {
                        let t = self.store.get(id);
                        Tensor::zeros(t.rows(), t.cols())
                    })
            })
            .collect()
    }
}
