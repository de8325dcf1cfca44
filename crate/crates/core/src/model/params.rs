//! Named parameter tensors, gradient sets and Glorot initialization.

use nalgebra::DMatrix;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Shape of one tensor plus the fans used for its initialization bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub rows: usize,
    pub cols: usize,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl TensorSpec {
    pub fn matrix(rows: usize, cols: usize) -> Self {
        TensorSpec { rows, cols, fan_in: cols, fan_out: rows }
    }

    pub fn glorot_bound(&self) -> f64 {
        (6.0 / (self.fan_in + self.fan_out) as f64).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub value: DMatrix<f64>,
}

/// Ordered collection of trainable tensors. Order is part of the contract:
/// gradient sets, optimizer moments and checkpoints all index by position.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: Vec<NamedTensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: DMatrix<f64>) -> usize {
        let name = name.into();
        assert!(self.index_of(&name).is_none(), "duplicate parameter {name}");
        self.tensors.push(NamedTensor { name, value });
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn tensors(&self) -> &[NamedTensor] {
        &self.tensors
    }

    pub fn get(&self, idx: usize) -> &DMatrix<f64> {
        &self.tensors[idx].value
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut DMatrix<f64> {
        &mut self.tensors[idx].value
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.tensors[idx].name
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.tensors.iter().position(|t| t.name == name)
    }

    pub fn by_name(&self, name: &str) -> Option<&DMatrix<f64>> {
        self.index_of(name).map(|i| self.get(i))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut DMatrix<f64>> {
        self.index_of(name).map(move |i| self.get_mut(i))
    }

    /// Total number of scalar entries.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(|t| t.value.len()).sum()
    }

    pub fn sum_squares(&self) -> f64 {
        self.tensors.iter().map(|t| t.value.norm_squared()).sum()
    }

    pub fn check_finite(&self) -> Result<()> {
        for t in &self.tensors {
            if t.value.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { what: format!("parameter {}", t.name) });
            }
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> GradientSet {
        GradientSet {
            names: self.tensors.iter().map(|t| t.name.clone()).collect(),
            grads: self.tensors.iter().map(|t| DMatrix::zeros(t.value.nrows(), t.value.ncols())).collect(),
        }
    }

    /// True when `other` has the same names and shapes in the same order.
    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.name == b.name && a.value.shape() == b.value.shape())
    }
}

/// One gradient tensor per parameter, shape-matched and in the same order.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    names: Vec<String>,
    grads: Vec<DMatrix<f64>>,
}

impl GradientSet {
    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn get(&self, idx: usize) -> &DMatrix<f64> {
        &self.grads[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut DMatrix<f64> {
        &mut self.grads[idx]
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn by_name(&self, name: &str) -> Option<&DMatrix<f64>> {
        self.names.iter().position(|n| n == name).map(|i| &self.grads[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &DMatrix<f64>)> {
        self.names.iter().map(String::as_str).zip(&self.grads)
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.iter().map(|g| g.norm_squared()).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, c: f64) {
        for g in &mut self.grads {
            *g *= c;
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, g) in self.iter() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { what: format!("gradient of {name}") });
            }
        }
        Ok(())
    }
}

/// Uniform entries in `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot(rng: &mut Rng, spec: TensorSpec) -> DMatrix<f64> {
    let bound = spec.glorot_bound();
    // Row-major fill so the draw order does not depend on storage layout.
    let mut m = DMatrix::zeros(spec.rows, spec.cols);
    for i in 0..spec.rows {
        for j in 0..spec.cols {
            m[(i, j)] = rng.random_range(-bound..bound);
        }
    }
    m
}

/// Initializes a store from `(name, spec)` entries in order. Entries with a
/// zero-sized fan (scalars such as a gate logit) start at zero.
pub fn init_store(rng: &mut Rng, layout: &[(String, TensorSpec)]) -> ParamStore {
    let mut store = ParamStore::new();
    for (name, spec) in layout {
        let value = if spec.fan_in + spec.fan_out == 0 {
            DMatrix::zeros(spec.rows, spec.cols)
        } else {
            glorot(rng, *spec)
        };
        store.push(name.clone(), value);
    }
    store
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{substream, Stream};

    #[test]
    fn glorot_entries_within_bound() {
        let mut rng = substream(1, Stream::Test);
        let spec = TensorSpec::matrix(7, 13);
        let m = glorot(&mut rng, spec);
        let b = (6.0f64 / 20.0).sqrt();
        assert!(m.iter().all(|v| v.abs() <= b));
        assert!(m.iter().any(|v| v.abs() > b * 0.5));
    }

    #[test]
    fn store_lookup_and_gradients() {
        let mut s = ParamStore::new();
        s.push("a", DMatrix::from_element(2, 3, 1.0));
        s.push("b", DMatrix::from_element(1, 1, 2.0));
        assert_eq!(s.count(), 7);
        assert_eq!(s.sum_squares(), 10.0);
        let mut g = s.zeros_like();
        g.get_mut(1)[(0, 0)] = 3.0;
        g.get_mut(0)[(1, 2)] = 4.0;
        assert_eq!(g.global_norm(), 5.0);
        assert_eq!(g.by_name("b").unwrap()[(0, 0)], 3.0);
        *s.by_name_mut("a").unwrap() *= f64::NAN;
        assert!(matches!(s.check_finite(), Err(Error::NonFinite { .. })));
    }
}
