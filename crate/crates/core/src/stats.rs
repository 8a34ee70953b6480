//! Small descriptive-statistics helpers.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

pub fn mean(x: &[f64]) -> f64 {
    if x.is_empty() {
        return f64::NAN;
    }
    x.iter().sum::<f64>() / x.len() as f64
}

/// Sample standard deviation (n - 1 denominator).
pub fn sample_sd(x: &[f64]) -> f64 {
    let n = x.len();
    if n < 2 {
        return f64::NAN;
    }
    let m = mean(x);
    (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
}

/// Number of order statistics in the lower `level` tail: `ceil(level * n)`,
/// guarded against floating-point spill (0.15 * 100 is not exactly 15).
pub fn lower_rank(level: f64, n: usize) -> usize {
    let k = (level * n as f64 - 1e-9).ceil();
    (k.max(1.0) as usize).min(n)
}

/// Empirical quantile conventions.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum QuantileConvention {
    /// The `ceil(level * n)`-th order statistic.
    #[default]
    LowerEmpirical,
    /// Linear interpolation between order statistics (Hyndman-Fan type 7).
    Linear,
}

/// Quantile of an ascending-sorted slice.
pub fn quantile_sorted(sorted: &[f64], level: f64, conv: QuantileConvention) -> f64 {
    let n = sorted.len();
    assert!(n > 0, "quantile of empty sample");
    match conv {
        QuantileConvention::LowerEmpirical => sorted[lower_rank(level, n) - 1],
        QuantileConvention::Linear => {
            let h = (n - 1) as f64 * level.clamp(0.0, 1.0);
            let lo = h.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
        }
    }
}

pub fn sorted(x: &[f64]) -> Vec<f64> {
    let mut v = x.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Two-sided normal p-value for a z statistic.
pub fn two_sided_p(z: f64) -> f64 {
    if !z.is_finite() {
        return if z.is_nan() { f64::NAN } else { 0.0 };
    }
    let n = Normal::standard();
    2.0 * n.cdf(-z.abs())
}

/// Significance stars at the 10/5/1 percent levels.
pub fn stars(p: f64) -> &'static str {
    if p < 0.01 {
        "***"
    } else if p < 0.05 {
        "**"
    } else if p < 0.10 {
        "*"
    } else {
        ""
    }
}

pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let ma = mean(a);
    let mb = mean(b);
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    sab / (saa * sbb).sqrt()
}

/// Percentile interval from replicate estimates: the `(1-level)/2` and
/// `(1+level)/2` linear-interpolation quantiles of the sorted values.
pub fn percentile_ci(values: &[f64], level: f64) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let s = sorted(values);
    let a = (1.0 - level) / 2.0;
    Some((
        quantile_sorted(&s, a, QuantileConvention::Linear),
        quantile_sorted(&s, 1.0 - a, QuantileConvention::Linear),
    ))
}
