//! Training objective: binary cross-entropy on logits plus soft Dice,
//! weighted 1:5, smoothing 1.

use crate::autodiff::Var;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DICE_WEIGHT: f64 = 5.0;
pub const DICE_SMOOTHING: f64 = 1.0;

/// Mean over pixels of `softplus(z) - z*y`, the stable form of
/// `-y ln s(z) - (1-y) ln(1-s(z))`.
pub fn bce_with_logits<'t, T: Scalar>(logits: Var<'t, T>, mask: &Tensor<T>) -> Var<'t, T> {
    let y = logits.tape().leaf(mask.clone());
    logits.softplus().sub(logits.mul(y)).mean_all()
}

/// `1 - (2*sum(p*y) + s) / (sum(p) + sum(y) + s)` with `p = sigmoid(z)`.
pub fn dice_loss<'t, T: Scalar>(logits: Var<'t, T>, mask: &Tensor<T>) -> Var<'t, T> {
    let y = logits.tape().leaf(mask.clone());
    let p = logits.sigmoid();
    let s = T::from_f64(DICE_SMOOTHING);
    let num = p.mul(y).sum_all().affine(T::from_f64(2.0), s);
    let den = p.sum_all().add(y.sum_all()).affine(T::ONE, s);
    num.div(den).affine(T::from_f64(-1.0), T::ONE)
}

/// `bce + 5 * dice`.
pub fn mixed_loss<'t, T: Scalar>(logits: Var<'t, T>, mask: &Tensor<T>) -> Var<'t, T> {
    assert_eq!(
        logits.shape(),
        mask.shape().to_vec(),
        "shape error: logits {:?} vs mask {:?}",
        logits.shape(),
        mask.shape()
    );
    debug_assert!(
        mask.data().iter().all(|&v| v == T::ZERO || v == T::ONE),
        "mask must be binary"
    );
    bce_with_logits(logits, mask).add(dice_loss(logits, mask).affine(T::from_f64(DICE_WEIGHT), T::ZERO))
}
