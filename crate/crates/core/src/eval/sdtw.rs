use crate::error::{Error, Result};

/// Soft-DTW between two sequences of equal-width vectors (row-major,
/// `width` values per step) under squared Euclidean cost.
pub fn soft_dtw(a: &[f64], b: &[f64], width: usize, gamma: f64) -> Result<f64> {
    if width == 0 || a.is_empty() || b.is_empty() || !a.len().is_multiple_of(width) || !b.len().is_multiple_of(width) {
        return Err(Error::Invalid(
            "soft_dtw needs nonempty sequences of whole steps".into(),
        ));
    }
    if !(gamma > 0.0) {
        return Err(Error::Invalid(format!("soft_dtw gamma must be positive, got {gamma}")));
    }
    let (n, m) = (a.len() / width, b.len() / width);
    let cols = m + 1;
    let mut r = vec![f64::INFINITY; (n + 1) * cols];
    r[0] = 0.0;
    for i in 1..=n {
        let ai = &a[(i - 1) * width..i * width];
        for j in 1..=m {
            let bj = &b[(j - 1) * width..j * width];
            let cost: f64 = ai.iter().zip(bj).map(|(x, y)| (x - y) * (x - y)).sum();
            let prev = [r[(i - 1) * cols + j], r[i * cols + j - 1], r[(i - 1) * cols + j - 1]];
            r[i * cols + j] = cost + softmin(prev, gamma);
        }
    }
    Ok(r[n * cols + m])
}

/// `-γ log Σ exp(-u/γ)`, stable for infinite entries.
fn softmin(u: [f64; 3], gamma: f64) -> f64 {
    let lo = u.iter().copied().fold(f64::INFINITY, f64::min);
    if lo == f64::INFINITY {
        return f64::INFINITY;
    }
    let s: f64 = u.iter().map(|&x| (-(x - lo) / gamma).exp()).sum();
    lo - gamma * s.ln()
}
