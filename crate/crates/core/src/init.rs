//! Weight initialization: Kaiming-uniform for convs and linears, zeros for
//! biases, log-uniform negatives for scan decay matrices.

use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Kaiming-uniform with gain sqrt(2): U(-b, b), b = sqrt(6 / fan_in).
/// For weights feeding a ReLU-family activation.
pub fn kaiming_uniform<T: Scalar>(rng: &mut Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    scaled_uniform(rng, shape, fan_in, 2.0f64.sqrt())
}

/// Variance-preserving uniform (gain 1): U(-b, b), b = sqrt(3 / fan_in).
/// For purely linear chains and weights feeding bounded gates; ReLU-gain
/// init compounds a 2x variance per layer through activation-free stacks.
pub fn linear_uniform<T: Scalar>(rng: &mut Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    scaled_uniform(rng, shape, fan_in, 1.0)
}

fn scaled_uniform<T: Scalar>(rng: &mut Rng, shape: &[usize], fan_in: usize, gain: f64) -> Tensor<T> {
    let bound = gain * (3.0 / fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| T::from_f64(rng.range(-bound, bound))).collect())
}

pub fn uniform<T: Scalar>(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| T::from_f64(rng.range(lo, hi))).collect())
}

/// Conv weight `[C_out, C_in/g, kh, kw]` with fan_in = (C_in/g)*kh*kw,
/// ReLU-family gain.
pub fn conv_weight<T: Scalar>(
    rng: &mut Rng,
    cout: usize,
    cin_per_group: usize,
    kh: usize,
    kw: usize,
) -> Tensor<T> {
    kaiming_uniform(rng, &[cout, cin_per_group, kh, kw], cin_per_group * kh * kw)
}

/// Conv weight with variance-preserving gain.
pub fn conv_weight_linear<T: Scalar>(
    rng: &mut Rng,
    cout: usize,
    cin_per_group: usize,
    kh: usize,
    kw: usize,
) -> Tensor<T> {
    linear_uniform(rng, &[cout, cin_per_group, kh, kw], cin_per_group * kh * kw)
}

/// Linear weight `[d_in, d_out]` with fan_in = d_in, ReLU-family gain.
pub fn linear_weight<T: Scalar>(rng: &mut Rng, d_in: usize, d_out: usize) -> Tensor<T> {
    kaiming_uniform(rng, &[d_in, d_out], d_in)
}

/// Linear weight with variance-preserving gain.
pub fn linear_weight_linear<T: Scalar>(rng: &mut Rng, d_in: usize, d_out: usize) -> Tensor<T> {
    linear_uniform(rng, &[d_in, d_out], d_in)
}
