use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named trainable tensors of one model.
///
/// `grad_version` bumps every time fresh gradients are accumulated, which lets
/// the optimizer refuse to step on stale gradients.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    grad_version: u64,
}

/// Tape handles for every parameter of a store, valid for one tape.
pub struct Bound(Vec<Var>);

impl std::ops::Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(tensor.with_grad());
        ParamId(self.tensors.len() - 1)
    }

    /// Gaussian-initialised `[rows × cols]` weight with std `1/sqrt(rows)`.
    pub fn add_weight(&mut self, name: &str, rows: usize, cols: usize, rng: &mut impl Rng) -> ParamId {
        self.add_scaled(name, &[rows, cols], 1.0 / (rows as f32).sqrt(), rng)
    }

    pub fn add_scaled(&mut self, name: &str, shape: &[usize], std: f32, rng: &mut impl Rng) -> ParamId {
        let normal = Normal::new(0.0f32, std).expect("positive std");
        let t = Tensor::from_fn(shape, |_| normal.sample(rng)).expect("finite init");
        self.add(name, t)
    }

    pub fn add_const(&mut self, name: &str, shape: &[usize], value: f32) -> ParamId {
        let t = Tensor::from_fn(shape, |_| value).expect("finite init");
        self.add(name, t)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub(crate) fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn grad_version(&self) -> u64 {
        self.grad_version
    }

    /// Records every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound(self.tensors.iter().map(|t| tape.leaf(t)).collect())
    }

    /// Adds the gradients of the last backward pass into the parameters.
    pub fn accumulate_grads(&mut self, tape: &Tape, bound: &Bound) -> Result<()> {
        for (t, &var) in self.tensors.iter_mut().zip(&bound.0) {
            if let Some(g) = tape.grad(var) {
                t.accumulate_grad(g)?;
            }
        }
        self.grad_version += 1;
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Overwrites parameter values by name; every parameter must be supplied
    /// with a matching shape.
    pub fn load(&mut self, values: &[(String, Vec<usize>, Vec<f32>)]) -> Result<()> {
        if values.len() != self.tensors.len() {
            return Err(Error::Config(format!(
                "expected {} parameters, found {}",
                self.tensors.len(),
                values.len()
            )));
        }
        for (name, shape, data) in values {
            let i = self
                .names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
            if self.tensors[i].shape() != shape.as_slice() {
                return Err(Error::shape("ParamStore::load", self.tensors[i].shape(), shape));
            }
            self.tensors[i].set_data(data.clone())?;
        }
        Ok(())
    }
}
