//! Seeded parameter initializers.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::Tensor;

/// Normal(0, sqrt(2 / fan_in)); suited to layers followed by ReLU.
pub fn he_normal<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    normal(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

/// Normal(0, sqrt(1 / fan_in)); for linear outputs.
pub fn lecun_normal<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    normal(shape, (1.0 / fan_in as f64).sqrt(), rng)
}

pub fn normal<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::from_vec(shape, data).expect("shape product matches")
}

pub fn zeros(shape: &[usize]) -> Tensor {
    Tensor::zeros(shape)
}
