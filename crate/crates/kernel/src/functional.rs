//! Gradient-free versions of the tape's pointwise and row-wise primitives,
//! sharing their formulas so inference paths agree with training.

use crate::scalar::Scalar;

pub(crate) const LN_EPS: f64 = 1e-5;
pub(crate) const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
pub(crate) const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu<T: Scalar>(v: T) -> T {
    let c = T::from_f64_lossy(GELU_C);
    let a = T::from_f64_lossy(GELU_A);
    let half = T::from_f64_lossy(0.5);
    half * v * (T::one() + tanh_exp(c * (v + a * v * v * v)))
}

/// `tanh` through a single `exp`; much cheaper than libm's `tanhf` and
/// accurate to a few ulps away from zero, which is all GELU needs.
pub(crate) fn tanh_exp<T: Scalar>(z: T) -> T {
    let two = T::one() + T::one();
    T::one() - two / ((z + z).exp() + T::one())
}

/// Normalizes `row` in place to zero mean and unit variance; returns the
/// reciprocal standard deviation.
pub fn layer_norm_row<T: Scalar>(row: &mut [T]) -> T {
    let eps = T::from_f64_lossy(LN_EPS);
    let nf = T::from_usize(row.len()).expect("row length");
    let mean = row.iter().copied().sum::<T>() / nf;
    let var = row
        .iter()
        .map(|&v| {
            let d = v - mean;
            d * d
        })
        .sum::<T>()
        / nf;
    let r = T::one() / (var + eps).sqrt();
    for v in row.iter_mut() {
        *v = (*v - mean) * r;
    }
    r
}
