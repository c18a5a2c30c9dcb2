//! Shared fixtures for the benchmark targets.

use mixercseg::rng::Rng;
use mixercseg::{Scalar, Tensor};

pub fn rand_tensor<T: Scalar>(seed: u64, shape: &[usize]) -> Tensor<T> {
    let mut rng = Rng::new(seed);
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| T::from_f64(rng.range(-1.0, 1.0))).collect())
}
