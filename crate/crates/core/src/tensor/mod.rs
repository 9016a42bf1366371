//! Dense `f64` tensors, a reverse-mode tape, AdamW and a finite-difference
//! gradient checker.

mod checkpoint;
mod gradcheck;
mod optim;
mod tape;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC};
pub use gradcheck::{analytic_grads, finite_diff_check, finite_diff_check_against, GradCheckReport};
pub use optim::{adamw_step, linear_warmup, AdamW, OptimizerState};
pub use tape::{Attention, Tape, Var};

use std::sync::atomic::{AtomicU64, Ordering};

use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Row-major dense array of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape("tensor", format!("zero-sized dim in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("from_rows", "ragged rows"));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn randn(shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(|_| normal.sample(rng)).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.set_requires_grad(requires_grad);
        self
    }

    pub fn set_requires_grad(&mut self, requires_grad: bool) {
        self.requires_grad = requires_grad;
        if !requires_grad {
            self.grad = None;
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Stores a gradient. Ignored for tensors that do not require one.
    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::shape(
                "set_grad",
                format!("grad has {} values for shape {:?}", grad.len(), self.shape),
            ));
        }
        if self.requires_grad {
            self.grad = Some(grad);
        }
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Option<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Some((r, c)),
            _ => None,
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let cols = *self.shape.last().unwrap();
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape, shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub tensor: Tensor,
    pub frozen: bool,
}

/// Named, insertion-ordered collection of model weights.
#[derive(Debug, Clone)]
pub struct ParameterSet {
    entries: IndexMap<String, Parameter>,
    // Distinguishes sets that share parameter names on one tape.
    id: u64,
}

impl Default for ParameterSet {
    fn default() -> Self {
        static NEXT_ID: AtomicU64 = AtomicU64::new(0);
        Self {
            entries: IndexMap::new(),
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
        }
    }
}

impl PartialEq for ParameterSet {
    fn eq(&self, other: &Self) -> bool {
        self.entries == other.entries
    }
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn id(&self) -> u64 {
        self.id
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor, frozen: bool) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Data(format!("duplicate parameter name `{name}`")));
        }
        let tensor = tensor.with_requires_grad(!frozen);
        self.entries.insert(name, Parameter { tensor, frozen });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|p| &p.tensor)
            .ok_or_else(|| Error::Data(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .map(|p| &mut p.tensor)
            .ok_or_else(|| Error::Data(format!("missing parameter `{name}`")))
    }

    pub fn is_frozen(&self, name: &str) -> Option<bool> {
        self.entries.get(name).map(|p| p.frozen)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Parameter)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Parameter)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar values across all entries.
    pub fn num_elements(&self) -> usize {
        self.entries.values().map(|p| p.tensor.len()).sum()
    }

    pub fn num_trainable(&self) -> usize {
        self.entries
            .values()
            .filter(|p| !p.frozen)
            .map(|p| p.tensor.len())
            .sum()
    }

    pub fn freeze_all(&mut self) {
        for p in self.entries.values_mut() {
            p.frozen = true;
            p.tensor.set_requires_grad(false);
        }
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) -> Result<()> {
        let p = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Data(format!("missing parameter `{name}`")))?;
        p.frozen = frozen;
        p.tensor.set_requires_grad(!frozen);
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.tensor.clear_grad();
        }
    }

    /// Copies gradients of every parameter leaf recorded on `tape` into the
    /// matching entries. Frozen entries are left without a gradient.
    pub fn pull_grads(&mut self, tape: &Tape) -> Result<()> {
        for (name, var) in tape.param_bindings(self.id) {
            let Some(p) = self.entries.get_mut(name) else {
                continue;
            };
            if p.frozen {
                continue;
            }
            if let Some(g) = tape.grad(var) {
                p.tensor.set_grad(g.to_vec())?;
            }
        }
        Ok(())
    }

    /// Concatenated little-endian bytes of every value, in entry order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.num_elements() * 8);
        for p in self.entries.values() {
            for v in p.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::new(vec![2, 3], vec![0.0; 5]),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn frozen_tensor_never_holds_grad() {
        let mut t = Tensor::zeros(&[2]);
        t.set_grad(vec![1.0, 2.0]).unwrap();
        assert!(t.grad().is_none());
        let mut t = t.with_requires_grad(true);
        t.set_grad(vec![1.0, 2.0]).unwrap();
        assert_eq!(t.grad(), Some(&[1.0, 2.0][..]));
        t.set_requires_grad(false);
        assert!(t.grad().is_none());
    }

    #[test]
    fn parameter_set_keeps_insertion_order() {
        let mut ps = ParameterSet::new();
        for name in ["z", "a", "m"] {
            ps.insert(name, Tensor::zeros(&[1]), false).unwrap();
        }
        assert_eq!(ps.names().collect::<Vec<_>>(), ["z", "a", "m"]);
        assert!(ps.insert("a", Tensor::zeros(&[1]), false).is_err());
    }
}
