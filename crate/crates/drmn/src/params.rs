//! Named model parameters and their gradients.
//!
//! A `ParamSet` is an ordered collection of named matrices; order is
//! insertion order and stays stable, so optimizer state, gradient stores,
//! and checkpoints can all align by index.

use crate::matrix::Matrix;
use std::collections::HashMap;

#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: Vec<(String, Matrix)>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    /// Registers a parameter. Names are unique; a duplicate is a programming
    /// error.
    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> usize {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name:?}"
        );
        let idx = self.entries.len();
        self.index.insert(name.clone(), idx);
        self.entries.push((name, value));
        idx
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn idx(&self, name: &str) -> usize {
        *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"))
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.entries[idx].0
    }

    pub fn value(&self, idx: usize) -> &Matrix {
        &self.entries[idx].1
    }

    pub fn value_mut(&mut self, idx: usize) -> &mut Matrix {
        &mut self.entries[idx].1
    }

    pub fn by_name(&self, name: &str) -> &Matrix {
        self.value(self.idx(name))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.entries.iter().map(|(n, m)| (n.as_str(), m))
    }

    /// Total scalar count across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, m)| m.data().len()).sum()
    }

    pub fn first_nonfinite(&self) -> Option<String> {
        self.entries
            .iter()
            .find(|(_, m)| !m.is_finite())
            .map(|(n, _)| n.clone())
    }
}

/// How a tape leaf maps back onto a parameter: the whole matrix, or a
/// row-gathered view (embedding lookups), whose gradient scatters back by
/// row index.
#[derive(Debug, Clone)]
pub enum Binding {
    Full(usize),
    Rows(usize, Vec<usize>),
}

/// Gradients aligned index-for-index with a `ParamSet`.
#[derive(Debug, Clone)]
pub struct GradStore {
    grads: Vec<Matrix>,
}

impl GradStore {
    pub fn zeros(params: &ParamSet) -> Self {
        let grads = params
            .iter()
            .map(|(_, m)| Matrix::zeros(m.rows, m.cols))
            .collect();
        GradStore { grads }
    }

    pub fn get(&self, idx: usize) -> &Matrix {
        &self.grads[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Matrix {
        &mut self.grads[idx]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// self += other * w. Used to merge per-example gradients into a batch.
    pub fn add_scaled(&mut self, other: &GradStore, w: f64) {
        assert_eq!(self.grads.len(), other.grads.len());
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            let ad = a.data_mut();
            for (x, y) in ad.iter_mut().zip(b.data()) {
                *x += y * w;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.grads {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        let sq: f64 = self
            .grads
            .iter()
            .flat_map(|g| g.data())
            .map(|x| x * x)
            .sum();
        sq.sqrt()
    }

    /// Scales gradients so the global norm is at most `max`. Returns the
    /// pre-clip norm.
    pub fn clip_global_norm(&mut self, max: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max && norm > 0.0 {
            self.scale(max / norm);
        }
        norm
    }

    pub fn first_nonfinite(&self, params: &ParamSet) -> Option<String> {
        self.grads
            .iter()
            .position(|g| !g.is_finite())
            .map(|i| params.name(i).to_string())
    }
}
