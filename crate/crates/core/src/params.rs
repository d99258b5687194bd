//! Trainable parameters and their registry.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::collections::HashMap;

#[derive(Debug, Clone)]
pub struct Parameter<S: Scalar> {
    pub name: String,
    pub value: Tensor<S>,
    pub grad: Tensor<S>,
}

/// Ordered, name-unique parameter registry. Order is insertion order and is
/// what the checkpoint writer follows.
pub struct ParamSet<S: Scalar> {
    items: Vec<Parameter<S>>,
    index: HashMap<String, usize>,
}

impl<S: Scalar> Default for ParamSet<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        ParamSet {
            items: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let grad = Tensor::zeros(value.shape());
        let id = self.items.len();
        self.index.insert(name.clone(), id);
        self.items.push(Parameter { name, value, grad });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, id: usize) -> &Parameter<S> {
        &self.items[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Parameter<S> {
        &mut self.items[id]
    }

    pub fn lookup(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<S>> {
        self.items.iter()
    }

    /// Total number of trainable scalars.
    pub fn count_scalars(&self) -> usize {
        self.items.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.items {
            p.grad = Tensor::zeros(p.value.shape());
        }
    }

    pub fn accumulate_grad(&mut self, id: usize, g: &Tensor<S>) {
        let p = &mut self.items[id];
        debug_assert_eq!(p.grad.shape(), g.shape());
        let dst = p.grad.data_mut();
        for (d, &s) in dst.iter_mut().zip(g.data()) {
            *d += s;
        }
    }

    /// All gradients exactly zero (the post-reset invariant).
    pub fn grads_are_zero(&self) -> bool {
        self.items
            .iter()
            .all(|p| p.grad.data().iter().all(|&g| g == S::zero()))
    }
}

/// Stable 64-bit FNV-1a, used to give every layer its own init stream no
/// matter in which order layers are built.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h
}

/// Zero-mean normal init with variance 2/fan_in; biases start at zero.
pub fn he_normal<S: Scalar>(shape: [usize; 4], fan_in: usize, seed: u64, name: &str) -> Tensor<S> {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("valid std");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name.as_bytes()));
    let numel: usize = shape.iter().product();
    let data: Vec<S> = (0..numel)
        .map(|_| S::of_f64(normal.sample(&mut rng)))
        .collect();
    Tensor::new(shape, data).expect("shape/data agree")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut set = ParamSet::<f32>::new();
        set.add("conv1a.weight", Tensor::zeros([1, 1, 1, 1])).unwrap();
        assert!(set.add("conv1a.weight", Tensor::zeros([1, 1, 1, 1])).is_err());
    }

    #[test]
    fn grads_zero_after_reset() {
        let mut set = ParamSet::<f32>::new();
        let id = set.add("w", Tensor::zeros([1, 2, 1, 1])).unwrap();
        set.accumulate_grad(id, &Tensor::full([1, 2, 1, 1], 3.0));
        assert!(!set.grads_are_zero());
        set.zero_grads();
        assert!(set.grads_are_zero());
    }

    #[test]
    fn accumulate_adds() {
        let mut set = ParamSet::<f32>::new();
        let id = set.add("w", Tensor::zeros([1, 1, 1, 2])).unwrap();
        set.accumulate_grad(id, &Tensor::full([1, 1, 1, 2], 1.5));
        set.accumulate_grad(id, &Tensor::full([1, 1, 1, 2], 1.0));
        assert_eq!(set.get(id).grad.data(), &[2.5, 2.5]);
    }

    #[test]
    fn he_init_is_seed_deterministic_and_name_dependent() {
        let a: Tensor<f64> = he_normal([1, 2, 3, 3], 18, 7, "conv1a.weight");
        let b: Tensor<f64> = he_normal([1, 2, 3, 3], 18, 7, "conv1a.weight");
        let c: Tensor<f64> = he_normal([1, 2, 3, 3], 18, 7, "conv2a.weight");
        assert_eq!(a.data(), b.data());
        assert_ne!(a.data(), c.data());
    }
}
