//! Seeded parameter initialisers. All randomness is threaded explicitly.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub type InitRng = ChaCha8Rng;

/// Uniform on `[-bound, bound]`.
pub fn uniform<T: Scalar>(rng: &mut InitRng, shape: &[usize], bound: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(rng.gen_range(-bound..=bound))).collect();
    Tensor::new(shape, data).expect("positive extents")
}

/// Uniform on `±1/sqrt(fan_in)`, the default for every projection.
pub fn fan_in_uniform<T: Scalar>(rng: &mut InitRng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    uniform(rng, shape, 1.0 / (fan_in as f64).sqrt())
}
