//! Dense row-major tensors. Values are immutable once built; clones share the
//! underlying buffer, and views materialize on write.

use std::sync::Arc;

use crate::scalar::Scalar;

pub const MAX_RANK: usize = 5;

#[derive(Clone)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

impl<T: Scalar> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.numel() <= 16 {
            write!(f, " {:?}", self.data)
        } else {
            write!(f, " [{} values]", self.numel())
        }
    }
}

fn check_shape(shape: &[usize]) {
    assert!(
        !shape.is_empty() && shape.len() <= MAX_RANK,
        "shape error: rank must be 1..={MAX_RANK}, got {shape:?}"
    );
    assert!(
        shape.iter().all(|&e| e >= 1),
        "shape error: all extents must be >= 1, got {shape:?}"
    );
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Self {
        check_shape(shape);
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            data.len(),
            "shape error: shape {shape:?} wants {numel} values, buffer has {}",
            data.len()
        );
        Tensor { shape: shape.to_vec(), data: Arc::new(data) }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        check_shape(shape);
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: Arc::new(vec![T::ZERO; numel]) }
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        check_shape(shape);
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: Arc::new(vec![v; numel]) }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::ONE)
    }

    pub fn scalar(v: T) -> Self {
        Self::from_vec(&[1], vec![v])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    /// Same buffer, new shape (numel must match).
    pub fn reshaped(&self, shape: &[usize]) -> Self {
        check_shape(shape);
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            self.numel(),
            "shape error: cannot reshape {:?} ({} values) to {:?} ({} values)",
            self.shape,
            self.numel(),
            shape,
            numel
        );
        Tensor { shape: shape.to_vec(), data: Arc::clone(&self.data) }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        let data: Vec<T> = self.data.iter().map(|&x| f(x)).collect();
        Tensor { shape: self.shape.clone(), data: Arc::new(data) }
    }

    pub fn zip(&self, other: &Tensor<T>, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!(
            self.shape, other.shape,
            "shape error: elementwise op on {:?} vs {:?}",
            self.shape, other.shape
        );
        let data: Vec<T> =
            self.data.iter().zip(other.data.iter()).map(|(&a, &b)| f(a, b)).collect();
        Tensor { shape: self.shape.clone(), data: Arc::new(data) }
    }

    pub fn sum(&self) -> T {
        let mut acc = T::ZERO;
        for &v in self.data.iter() {
            acc += v;
        }
        acc
    }

    pub fn max_abs(&self) -> T {
        let mut m = T::ZERO;
        for &v in self.data.iter() {
            m = m.maxs(v.abs());
        }
        m
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Index of the first non-finite value, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64()).collect()
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor::from_vec(&self.shape, self.data.iter().map(|v| U::from_f64(v.to_f64())).collect())
    }

    /// Exclusive access to the buffer, copying if it is shared.
    pub fn make_mut(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn bit_eq(&self, other: &Tensor<T>) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_f64().to_bits() == b.to_f64().to_bits())
    }
}

/// Row-major strides for a shape.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}
