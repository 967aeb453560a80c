//! Weight initializers. All draw from one caller-owned generator so a
//! model's parameters depend only on the seed and creation order.

use irfusion_tensor::{Real, Tensor};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Uniform in `±1/√fan_in` for a `[out, in, k, k]` conv weight.
pub fn conv<T: Real, R: Rng>(rng: &mut R, c_out: usize, c_in: usize, k: usize) -> Tensor<T> {
    let bound = 1.0 / ((c_in * k * k) as f64).sqrt();
    Tensor::rand_uniform(&[c_out, c_in, k, k], -bound, bound, rng)
}

/// Zero-mean normal `[out, in, 1, 1]` weight with the given deviation.
pub fn pointwise_normal<T: Real, R: Rng>(rng: &mut R, c_out: usize, c_in: usize, std: f64) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("finite deviation");
    Tensor::from_fn(&[c_out, c_in, 1, 1], |_| T::of(dist.sample(rng)))
}
