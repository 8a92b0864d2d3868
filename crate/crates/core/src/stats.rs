//! Scalar log-densities and order statistics shared by both model stages.

use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Log density of `N(x | mean, variance)`.
#[inline]
pub fn normal_ln_pdf(x: f64, mean: f64, variance: f64) -> f64 {
    let d = x - mean;
    -0.5 * (LN_2PI + variance.ln()) - 0.5 * d * d / variance
}

/// Log density of `N(x | mean, 1 / precision)`.
#[inline]
pub fn normal_ln_pdf_prec(x: f64, mean: f64, precision: f64) -> f64 {
    let d = x - mean;
    0.5 * (precision.ln() - LN_2PI) - 0.5 * precision * d * d
}

/// Gamma log density in the shape-rate parameterization.
#[inline]
pub fn gamma_ln_pdf(x: f64, shape: f64, rate: f64) -> f64 {
    if x <= 0.0 {
        return f64::NEG_INFINITY;
    }
    shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * x.ln() - rate * x
}

/// `ln(k!)`.
#[inline]
pub fn ln_factorial(k: u64) -> f64 {
    if k < 2 {
        return 0.0;
    }
    ln_gamma(k as f64 + 1.0)
}

/// Poisson log-pmf. `mean = 0` gives 0 for `k = 0` and `-inf` otherwise.
#[inline]
pub fn poisson_ln_pmf(k: u64, mean: f64) -> f64 {
    poisson_ln_pmf_with(k, mean, ln_factorial(k))
}

/// Poisson log-pmf with a precomputed `ln(k!)`.
#[inline]
pub fn poisson_ln_pmf_with(k: u64, mean: f64, ln_k_fact: f64) -> f64 {
    if mean == 0.0 {
        return if k == 0 { 0.0 } else { f64::NEG_INFINITY };
    }
    k as f64 * mean.ln() - mean - ln_k_fact
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample variance with divisor `n - 1`.
pub fn sample_variance(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64
}

pub fn sample_sd(xs: &[f64]) -> f64 {
    sample_variance(xs).sqrt()
}

/// Empirical quantile of already sorted data, interpolating linearly between
/// order statistics (`h = (n - 1) p`).
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    debug_assert!(n > 0);
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    if lo == hi {
        return sorted[lo];
    }
    let w = h - lo as f64;
    sorted[lo] + w * (sorted[hi] - sorted[lo])
}

/// Quantiles of unsorted data.
pub fn quantiles(xs: &[f64], probs: &[f64]) -> Result<Vec<f64>> {
    if xs.is_empty() {
        return Err(Error::Empty("quantiles of an empty sample".into()));
    }
    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(probs.iter().map(|&p| quantile_sorted(&sorted, p)).collect())
}

pub fn median(xs: &[f64]) -> Result<f64> {
    Ok(quantiles(xs, &[0.5])?[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn poisson_pmf_matches_direct_formula() {
        // 3^2 e^-3 / 2!
        let direct = (9.0 * (-3.0f64).exp() / 2.0).ln();
        assert!((poisson_ln_pmf(2, 3.0) - direct).abs() < 1e-12);
        assert_eq!(poisson_ln_pmf(0, 3.0), -3.0);
        assert_eq!(poisson_ln_pmf(0, 0.0), 0.0);
        assert_eq!(poisson_ln_pmf(1, 0.0), f64::NEG_INFINITY);
    }

    #[test]
    fn normal_forms_agree() {
        let a = normal_ln_pdf(0.3, -0.2, 4.0);
        let b = normal_ln_pdf_prec(0.3, -0.2, 0.25);
        assert!((a - b).abs() < 1e-14);
    }

    #[test]
    fn gamma_exponential_case() {
        // Gamma(1, rate) is Exponential(rate)
        let x = 0.37;
        let direct = (100.0f64).ln() - 100.0 * x;
        assert!((gamma_ln_pdf(x, 1.0, 100.0) - direct).abs() < 1e-12);
    }

    #[test]
    fn quantile_interpolates_order_statistics() {
        let xs: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(quantiles(&xs, &[0.5]).unwrap()[0], 50.5);
        assert_eq!(quantiles(&xs, &[0.0, 1.0]).unwrap(), vec![1.0, 100.0]);
        assert!(quantiles(&[], &[0.5]).is_err());
    }
}
