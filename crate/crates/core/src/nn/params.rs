use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng as _;

use super::tape::Gradients;
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub values: Array2<f64>,
    pub grads: Array2<f64>,
}

/// Named trainable arrays with gradient slots. Iteration is in name order,
/// which fixes the order of every reduction and optimizer update.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterStore {
    seed: u64,
    entries: BTreeMap<String, Param>,
}

impl ParameterStore {
    pub fn new(seed: u64) -> Self {
        ParameterStore {
            seed,
            entries: BTreeMap::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn insert(&mut self, name: &str, values: Array2<f64>) {
        let grads = Array2::zeros(values.dim());
        self.entries.insert(name.to_string(), Param { values, grads });
    }

    /// Glorot-uniform weights in `+-sqrt(6 / (rows + cols))`. The stream is
    /// keyed by the store seed and the entry name, so creation order does not
    /// matter.
    pub fn insert_glorot(&mut self, name: &str, rows: usize, cols: usize) {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let mut r = rng::stream(self.seed ^ rng::name_hash(name), rng::PARAM_INIT);
        let values = Array2::from_shape_fn((rows, cols), |_| r.random_range(-bound..=bound));
        self.insert(name, values);
    }

    pub fn insert_zeros(&mut self, name: &str, rows: usize, cols: usize) {
        self.insert(name, Array2::zeros((rows, cols)));
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn values(&self, name: &str) -> Option<&Array2<f64>> {
        self.entries.get(name).map(|p| &p.values)
    }

    pub fn values_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        self.entries.get_mut(name).map(|p| &mut p.values)
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.entries.iter_mut()
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

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|p| p.values.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.grads.fill(0.0);
        }
    }

    /// Adds `scale * g` into the gradient slot of every named entry.
    pub fn accumulate(&mut self, grads: &Gradients, scale: f64) {
        for (name, g) in grads {
            if let Some(p) = self.entries.get_mut(name) {
                p.grads.scaled_add(scale, g);
            }
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.entries
            .values()
            .map(|p| p.grads.iter().map(|g| g * g).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}
