use wm_kernel::{Scalar, Tensor};

/// Geometric head slopes `2^(-8h/n_heads)` for `h = 1..=n_heads`.
pub fn alibi_slopes(n_heads: usize) -> Vec<f64> {
    (1..=n_heads)
        .map(|h| (-8.0 * h as f64 / n_heads as f64).exp2())
        .collect()
}

/// Causal linear-distance bias shaped `[n_heads, seq_len, seq_len]`.
pub fn alibi_bias<T: Scalar>(seq_len: usize, n_heads: usize) -> Tensor<T> {
    let slopes = alibi_slopes(n_heads);
    Tensor::from_fn([n_heads, seq_len, seq_len], |idx| {
        let h = idx / (seq_len * seq_len);
        let i = idx / seq_len % seq_len;
        let j = idx % seq_len;
        bias_entry(slopes[h], i, j)
    })
}

pub(crate) fn bias_entry<T: Scalar>(slope: f64, i: usize, j: usize) -> T {
    if j > i {
        T::neg_infinity()
    } else {
        T::from_f64_lossy(-slope * (i - j) as f64)
    }
}
