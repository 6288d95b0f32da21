use rand::Rng;

use crate::rng;

use super::{Real, Tensor};

/// He-uniform weights, `U(-sqrt(6/fan_in), sqrt(6/fan_in))`, drawn from a
/// stream keyed by `(seed, name)`.
pub fn he_uniform<T: Real>(shape: &[usize], fan_in: usize, seed: u64, name: &str) -> Tensor<T> {
    let limit = (6.0 / fan_in as f64).sqrt();
    let mut r = rng::named_stream(seed, name);
    Tensor::from_fn(shape, |_| T::lit(r.random_range(-limit..limit)))
}

/// Small uniform biases, used by the frozen surrogate backbones so that a
/// blank input still produces informative activations.
pub fn uniform_bias<T: Real>(len: usize, scale: f64, seed: u64, name: &str) -> Tensor<T> {
    let mut r = rng::named_stream(seed, name);
    Tensor::from_fn(&[len], |_| T::lit(r.random_range(-scale..scale)))
}
