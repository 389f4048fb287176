//! Named parameter tensors.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Parameters addressed by hierarchical dotted names (`decoder.0.attn.w_a`).
/// Insertion order is stable and defines the flat parameter index.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Mat>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn insert(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.names.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|i| ParamId(*i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub(crate) fn rebuild_index(&mut self) {
        self.index = self
            .names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
    }

    /// Uniform `±sqrt(6 / (fan_in + fan_out)) * gain` initialization for a
    /// `[rows, cols]` weight.
    pub fn glorot(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> ParamId {
        let bound = gain * (6.0 / (rows + cols) as f64).sqrt();
        if bound == 0.0 {
            return self.zeros(name, rows, cols);
        }
        let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
        self.insert(name, Mat::from_vec(rows, cols, data))
    }

    pub fn zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.insert(name, Mat::zeros(rows, cols))
    }

    pub fn filled(&mut self, name: impl Into<String>, rows: usize, cols: usize, v: f64) -> ParamId {
        self.insert(name, Mat::from_vec(rows, cols, vec![v; rows * cols]))
    }
}
