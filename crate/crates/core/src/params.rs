//! Named, hierarchically keyed learnable tensors.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Owns every learnable tensor of a model. Names are dotted paths such as
/// `tia.0.mlp.w1`; insertion order is stable and defines serialization order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Mat)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Ids whose names start with `prefix`.
    pub fn ids_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.iter()
            .filter(move |(_, n, _)| n.starts_with(prefix))
            .map(|(id, _, _)| id)
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }

    /// Zeroes every tensor whose name ends with one of `suffixes`.
    pub fn zero_matching(&mut self, suffixes: &[&str]) {
        for (name, value) in self.names.iter().zip(self.values.iter_mut()) {
            if suffixes.iter().any(|s| name.ends_with(s)) {
                value.fill(0.0);
            }
        }
    }
}

/// Weight initialization helper threaded through model construction.
pub struct Init<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
}

impl<R: Rng> Init<'_, R> {
    /// Normal weights with std `gain / sqrt(fan_in)`.
    pub fn weight(&mut self, name: String, fan_in: usize, fan_out: usize, gain: f64) -> ParamId {
        let std = gain / (fan_in.max(1) as f64).sqrt();
        let rng = &mut *self.rng;
        let m = Mat::from_shape_fn((fan_in, fan_out), |_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        });
        self.store.insert(name, m)
    }

    pub fn normal(&mut self, name: String, rows: usize, cols: usize, std: f64) -> ParamId {
        let rng = &mut *self.rng;
        let m = Mat::from_shape_fn((rows, cols), |_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        });
        self.store.insert(name, m)
    }

    pub fn zeros(&mut self, name: String, rows: usize, cols: usize) -> ParamId {
        self.store.insert(name, Mat::zeros((rows, cols)))
    }

    pub fn filled(&mut self, name: String, rows: usize, cols: usize, v: f64) -> ParamId {
        self.store.insert(name, Mat::from_elem((rows, cols), v))
    }
}
