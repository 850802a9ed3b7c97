use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Stable handle into a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors in registration order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<R> {
    names: Vec<String>,
    values: Vec<Tensor<R>>,
    by_name: HashMap<String, usize>,
}

impl<R: Real> Default for ParamSet<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> ParamSet<R> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor<R>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let id = self.values.len();
        self.by_name.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<R> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<R> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<R>)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut Tensor<R>> {
        self.values.iter_mut()
    }

    /// Replace a parameter's value, keeping its registered shape.
    pub fn assign(&mut self, id: ParamId, value: Tensor<R>) -> Result<()> {
        let current = &self.values[id.0];
        if current.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "parameter `{}` has shape {:?}, got {:?}",
                self.names[id.0],
                current.shape(),
                value.shape()
            )));
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub fn cast<S: Real>(&self) -> ParamSet<S> {
        ParamSet {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            by_name: self.by_name.clone(),
        }
    }

    pub fn zeros_like(&self) -> Grads<R> {
        Grads {
            values: self
                .values
                .iter()
                .map(|v| Tensor::zeros(v.rows(), v.cols()))
                .collect(),
        }
    }
}

/// Gradient buffers aligned with a [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Grads<R> {
    values: Vec<Tensor<R>>,
}

impl<R: Real> Grads<R> {
    pub fn get(&self, id: ParamId) -> &Tensor<R> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<R> {
        &mut self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor<R>> {
        self.values.iter()
    }

    pub fn accumulate(&mut self, other: &Grads<R>) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: R) {
        for v in &mut self.values {
            v.scale_assign(s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.values.iter().map(Tensor::sum_sq).sum::<f64>().sqrt()
    }

    /// Rescale so the global L2 norm is at most `max_norm`. Returns the norm
    /// before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(R::of(max_norm / norm));
        }
        norm
    }
}

/// Fan-in scaled uniform init, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn init_uniform<R: Real>(rows: usize, cols: usize, fan_in: usize, rng: &mut impl Rng) -> Tensor<R> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound);
    let data = (0..rows * cols).map(|_| R::of(dist.sample(rng))).collect();
    Tensor::from_vec(rows, cols, data).expect("sized buffer")
}

/// Embedding-table init, zero-mean normal with std 0.02.
pub fn init_embedding<R: Real>(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor<R> {
    let dist = Normal::new(0.0, 0.02).expect("valid std");
    let data = (0..rows * cols).map(|_| R::of(dist.sample(rng))).collect();
    Tensor::from_vec(rows, cols, data).expect("sized buffer")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut ps = ParamSet::<f32>::new();
        ps.register("a", Tensor::zeros(1, 1)).unwrap();
        assert!(ps.register("a", Tensor::zeros(1, 1)).is_err());
        assert_eq!(ps.id("a"), Some(ParamId(0)));
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let mut ps = ParamSet::<f64>::new();
        ps.register("w", Tensor::zeros(1, 2)).unwrap();
        let mut g = ps.zeros_like();
        g.get_mut(ParamId(0)).data_mut().copy_from_slice(&[3.0, 4.0]);
        let before = g.clip_global_norm(1.0);
        assert_eq!(before, 5.0);
        assert!((g.global_norm() - 1.0).abs() < 1e-12);
    }
}
