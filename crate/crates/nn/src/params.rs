use indexmap::IndexMap;

use crate::error::{NnError, Result};
use crate::tensor::{Scalar, Tensor};

/// Named parameter tensors, iterated in insertion order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T = f32> {
    entries: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        ParamSet { entries: IndexMap::new() }
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(NnError::DuplicateParam(name));
        }
        self.entries.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.get_index_of(name)
    }

    pub fn by_index(&self, idx: usize) -> (&str, &Tensor<T>) {
        let (k, v) = self.entries.get_index(idx).expect("param index in range");
        (k.as_str(), v)
    }

    pub fn by_index_mut(&mut self, idx: usize) -> &mut Tensor<T> {
        self.entries.get_index_mut(idx).expect("param index in range").1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn num_elements(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    pub fn zeros_like(&self) -> Self {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet { entries: self.entries.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    /// Errors unless `other` has the same names and shapes in the same order.
    pub fn check_compatible(&self, other: &ParamSet<T>) -> Result<()> {
        if self.len() != other.len() {
            return Err(NnError::ShapeMismatch {
                op: "param_set",
                shapes: vec![vec![self.len()], vec![other.len()]],
            });
        }
        for ((ka, va), (kb, vb)) in self.entries.iter().zip(&other.entries) {
            if ka != kb {
                return Err(NnError::UnknownParam(kb.clone()));
            }
            if va.shape() != vb.shape() {
                return Err(NnError::ShapeMismatch {
                    op: "param_set",
                    shapes: vec![va.shape().to_vec(), vb.shape().to_vec()],
                });
            }
        }
        Ok(())
    }

    /// Largest absolute elementwise difference between two compatible sets.
    pub fn max_abs_diff(&self, other: &ParamSet<T>) -> Result<T> {
        self.check_compatible(other)?;
        let mut m = T::zero();
        for ((_, a), (_, b)) in self.entries.iter().zip(&other.entries) {
            for (x, y) in a.data().iter().zip(b.data()) {
                m = m.max((*x - *y).abs());
            }
        }
        Ok(m)
    }

    /// Scales every tensor in place.
    pub fn scale(&mut self, factor: T) {
        for t in self.entries.values_mut() {
            for x in t.data_mut() {
                *x *= factor;
            }
        }
    }

    /// Elementwise `self += other`.
    pub fn accumulate(&mut self, other: &ParamSet<T>) -> Result<()> {
        self.check_compatible(other)?;
        for (a, (_, b)) in self.entries.values_mut().zip(&other.entries) {
            a.add_assign(b);
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(Tensor::all_finite)
    }

    /// Replaces every value with zero, keeping names and shapes.
    pub fn zero_out(&mut self) {
        for t in self.entries.values_mut() {
            t.data_mut().iter_mut().for_each(|x| *x = T::zero());
        }
    }
}
