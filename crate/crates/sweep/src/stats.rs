//! Signed-rank test, Pearson correlation and the undefined-result marker.

use std::fmt;

use statrs::distribution::{ContinuousCDF, Normal};

/// Sample sizes up to this use the exact null distribution.
pub const EXACT_LIMIT: usize = 25;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Undefined {
    /// One side of the comparison has no records.
    EmptyCondition,
    /// No pair survives divergence and zero-difference filtering.
    NoUsablePairs,
    /// A column has zero variance.
    ZeroVariance,
    TooFewRecords,
}

impl fmt::Display for Undefined {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Undefined::EmptyCondition => "undefined:empty_condition",
            Undefined::NoUsablePairs => "undefined:no_usable_pairs",
            Undefined::ZeroVariance => "undefined:zero_variance",
            Undefined::TooFewRecords => "undefined:too_few_records",
        })
    }
}

/// A statistic that may be undefined for its input.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Stat<T> {
    Defined(T),
    Undefined(Undefined),
}

impl<T> Stat<T> {
    pub fn value(self) -> Option<T> {
        match self {
            Stat::Defined(v) => Some(v),
            Stat::Undefined(_) => None,
        }
    }

    pub fn is_defined(&self) -> bool {
        matches!(self, Stat::Defined(_))
    }
}

impl Stat<f64> {
    /// CSV cell: the number, or the undefined marker.
    pub fn cell(&self) -> String {
        match self {
            Stat::Defined(v) => v.to_string(),
            Stat::Undefined(u) => u.to_string(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SignedRank {
    /// Differences left after dropping zeros.
    pub n: usize,
    pub w_plus: f64,
    pub w_minus: f64,
    /// Two-sided p-value.
    pub p_value: f64,
    pub exact: bool,
}

impl SignedRank {
    /// The conventional statistic, the smaller rank sum.
    pub fn statistic(&self) -> f64 {
        self.w_plus.min(self.w_minus)
    }
}

/// Average ranks (1-based) of `values`, ties sharing their mean rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = rank;
        }
        i = j;
    }
    ranks
}

/// Wilcoxon signed-rank test on paired differences. Zero differences are
/// dropped. Up to [`EXACT_LIMIT`] nonzero differences the null distribution
/// of `W+` is enumerated exactly (ties handled through half-integer ranks);
/// above it the normal approximation with tie and continuity corrections is
/// used. The two-sided p-value doubles the smaller tail, capped at 1.
pub fn wilcoxon_signed_rank(diffs: &[f64]) -> Stat<SignedRank> {
    let nz: Vec<f64> = diffs.iter().copied().filter(|d| *d != 0.0 && !d.is_nan()).collect();
    let n = nz.len();
    if n == 0 {
        return Stat::Undefined(Undefined::NoUsablePairs);
    }
    let abs: Vec<f64> = nz.iter().map(|d| d.abs()).collect();
    let ranks = average_ranks(&abs);
    let w_plus: f64 = nz.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let total = (n * (n + 1)) as f64 / 2.0;
    let w_minus = total - w_plus;

    let (p_value, exact) = if n <= EXACT_LIMIT {
        // Doubled ranks are integers even with ties.
        let doubled: Vec<usize> = ranks.iter().map(|r| (r * 2.0).round() as usize).collect();
        let counts = rank_sum_counts(&doubled);
        let all: f64 = counts.iter().sum();
        let w = (w_plus * 2.0).round() as usize;
        let lower: f64 = counts[..=w].iter().sum::<f64>() / all;
        let upper: f64 = counts[w..].iter().sum::<f64>() / all;
        ((2.0 * lower.min(upper)).min(1.0), true)
    } else {
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        let mut ties = 0.0;
        let mut sorted = ranks.clone();
        sorted.sort_by(f64::total_cmp);
        let mut i = 0;
        while i < sorted.len() {
            let mut j = i + 1;
            while j < sorted.len() && sorted[j] == sorted[i] {
                j += 1;
            }
            let t = (j - i) as f64;
            ties += t * t * t - t;
            i = j;
        }
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - ties / 48.0;
        if var <= 0.0 {
            return Stat::Undefined(Undefined::ZeroVariance);
        }
        let z = ((w_plus - mean).abs() - 0.5).max(0.0) / var.sqrt();
        let normal = Normal::standard();
        ((2.0 * (1.0 - normal.cdf(z))).min(1.0), false)
    };
    Stat::Defined(SignedRank {
        n,
        w_plus,
        w_minus,
        p_value,
        exact,
    })
}

/// Number of sign assignments giving each doubled rank sum.
fn rank_sum_counts(doubled: &[usize]) -> Vec<f64> {
    let max: usize = doubled.iter().sum();
    let mut counts = vec![0.0f64; max + 1];
    counts[0] = 1.0;
    let mut reach = 0;
    for &r in doubled {
        for s in (0..=reach).rev() {
            if counts[s] != 0.0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    counts
}

/// Pearson correlation of two equally long columns.
pub fn pearson(x: &[f64], y: &[f64]) -> Stat<f64> {
    let n = x.len().min(y.len());
    if n < 3 {
        return Stat::Undefined(Undefined::TooFewRecords);
    }
    let mx = x[..n].iter().sum::<f64>() / n as f64;
    let my = y[..n].iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x[..n].iter().zip(&y[..n]) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Stat::Undefined(Undefined::ZeroVariance);
    }
    Stat::Defined((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

pub fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}
