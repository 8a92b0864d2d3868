//! Convergence diagnostics: rank-normalized split R-hat and multi-chain
//! effective sample size with Geyer's initial positive sequence.

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use super::PosteriorDraws;
use crate::error::{Error, Result};
use crate::stats;

/// A diagnostic value; `degenerate` marks the constant-draws convention.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Diagnostic {
    pub value: f64,
    pub degenerate: bool,
}

fn is_constant(chains: &[&[f64]]) -> bool {
    let first = chains.iter().find_map(|c| c.first()).copied();
    match first {
        None => true,
        Some(v) => chains.iter().all(|c| c.iter().all(|&x| x == v)),
    }
}

/// Average ranks (1-based), ties sharing the mean of their positions.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Classic (non-ranked) R-hat over already split chains of equal length.
fn psrf(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len() as f64;
    let n = chains[0].len() as f64;
    let means: Vec<f64> = chains.iter().map(|c| stats::mean(c)).collect();
    let grand = stats::mean(&means);
    let b = n / (m - 1.0) * means.iter().map(|x| (x - grand).powi(2)).sum::<f64>();
    let w = chains.iter().map(|c| stats::sample_variance(c)).sum::<f64>() / m;
    let var_plus = (n - 1.0) / n * w + b / n;
    (var_plus / w).sqrt()
}

/// Splits each chain in half, dropping the middle draw for odd lengths.
fn split_halves<'a>(chains: &[&'a [f64]], n: usize) -> Vec<&'a [f64]> {
    let half = n / 2;
    let mut split = Vec::with_capacity(chains.len() * 2);
    for c in chains {
        split.push(&c[..half]);
        split.push(&c[n - half..n]);
    }
    split
}

/// Split R-hat on normal scores of the pooled ranks.
fn rank_normalized(split: &[&[f64]]) -> f64 {
    let half = split[0].len();
    let pooled: Vec<f64> = split.iter().flat_map(|c| c.iter().copied()).collect();
    let ranks = average_ranks(&pooled);
    let total = pooled.len() as f64;
    let normal = Normal::standard();
    let scores: Vec<f64> = ranks
        .iter()
        .map(|r| normal.inverse_cdf((r - 0.375) / (total + 0.25)))
        .collect();
    let scored: Vec<Vec<f64>> = scores.chunks(half).map(|c| c.to_vec()).collect();
    psrf(&scored)
}

/// Rank-normalized split R-hat. Each chain is split in half, pooled draws
/// are replaced by normal scores of their ranks and the between/within
/// variance ratio is computed on the scores. The reported value is the
/// largest of the bulk statistic, the same statistic on draws folded about
/// the pooled median, and the split statistic on the raw draws; ranks alone
/// saturate near 1.8 when chains do not overlap at all.
/// Constant draws give 1 with `degenerate = true`.
pub fn rhat(chains: &[&[f64]]) -> Result<Diagnostic> {
    if chains.is_empty() {
        return Err(Error::Empty("R-hat needs at least one chain".into()));
    }
    let n = chains.iter().map(|c| c.len()).min().unwrap_or(0);
    if n < 4 {
        return Err(Error::Empty("R-hat needs at least 4 draws per chain".into()));
    }
    if is_constant(chains) {
        return Ok(Diagnostic {
            value: 1.0,
            degenerate: true,
        });
    }
    let split = split_halves(chains, n);
    let bulk = rank_normalized(&split);

    let pooled: Vec<f64> = split.iter().flat_map(|c| c.iter().copied()).collect();
    let med = stats::median(&pooled)?;
    let folded: Vec<Vec<f64>> = split
        .iter()
        .map(|c| c.iter().map(|x| (x - med).abs()).collect())
        .collect();
    let folded_refs: Vec<&[f64]> = folded.iter().map(|c| c.as_slice()).collect();
    let tail = if is_constant(&folded_refs) {
        1.0
    } else {
        rank_normalized(&folded_refs)
    };
    let raw: Vec<Vec<f64>> = split.iter().map(|c| c.to_vec()).collect();
    let classic = psrf(&raw);

    let value = [bulk, tail, classic]
        .into_iter()
        .filter(|v| v.is_finite())
        .fold(f64::NAN, f64::max);
    if !value.is_finite() {
        return Ok(Diagnostic {
            value: 1.0,
            degenerate: true,
        });
    }
    Ok(Diagnostic {
        value,
        degenerate: false,
    })
}

/// Autocovariance at `lag` with divisor `n`.
fn autocov(x: &[f64], mean: f64, lag: usize) -> f64 {
    let n = x.len();
    (0..n - lag).map(|i| (x[i] - mean) * (x[i + lag] - mean)).sum::<f64>() / n as f64
}

/// Effective sample size combining within-chain autocorrelation with the
/// between-chain variance. Autocorrelations are summed in adjacent pairs
/// while the pair sums stay positive, forced monotone, and the result is
/// capped at the total number of draws.
pub fn ess(chains: &[&[f64]]) -> Result<Diagnostic> {
    let m = chains.len();
    let n = chains.iter().map(|c| c.len()).min().unwrap_or(0);
    if m == 0 || m * n < 8 || n < 4 {
        return Err(Error::Empty("ESS needs at least 8 draws".into()));
    }
    let total = (m * n) as f64;
    if is_constant(chains) {
        return Ok(Diagnostic {
            value: total,
            degenerate: true,
        });
    }
    let chains: Vec<&[f64]> = chains.iter().map(|c| &c[..n]).collect();
    let means: Vec<f64> = chains.iter().map(|c| stats::mean(c)).collect();
    let nf = n as f64;
    let acov0: Vec<f64> = chains.iter().zip(&means).map(|(c, &mu)| autocov(c, mu, 0)).collect();
    let w = stats::mean(&acov0) * nf / (nf - 1.0);
    let mut var_plus = w * (nf - 1.0) / nf;
    if m > 1 {
        var_plus += stats::sample_variance(&means);
    }
    if !(var_plus > 0.0) {
        return Ok(Diagnostic {
            value: total,
            degenerate: true,
        });
    }
    let rho = |lag: usize| -> f64 {
        let mean_acov = chains
            .iter()
            .zip(&means)
            .map(|(c, &mu)| autocov(c, mu, lag))
            .sum::<f64>()
            / m as f64;
        1.0 - (w - mean_acov) / var_plus
    };

    let mut sum_pairs = 0.0;
    let mut prev_pair = f64::INFINITY;
    let mut lag = 0;
    while lag + 1 < n {
        let r0 = if lag == 0 { 1.0 } else { rho(lag) };
        let pair = r0 + rho(lag + 1);
        if pair <= 0.0 {
            break;
        }
        let pair = pair.min(prev_pair);
        sum_pairs += pair;
        prev_pair = pair;
        lag += 2;
    }
    let tau = (-1.0 + 2.0 * sum_pairs).max(1.0 / total.log10().max(1.0));
    Ok(Diagnostic {
        value: (total / tau).min(total),
        degenerate: false,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub quantiles: Vec<f64>,
}

/// Per-parameter mean, sd and empirical quantiles over pooled draws.
pub fn summarize(draws: &PosteriorDraws, probabilities: &[f64]) -> Result<Vec<ParamSummary>> {
    if draws.draws_per_chain() == 0 {
        return Err(Error::Empty("no retained draws".into()));
    }
    (0..draws.dim())
        .map(|p| {
            let pooled = draws.pooled(p);
            Ok(ParamSummary {
                name: draws.names[p].clone(),
                mean: stats::mean(&pooled),
                sd: stats::sample_sd(&pooled),
                quantiles: stats::quantiles(&pooled, probabilities)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamDiagnostics {
    pub param: String,
    pub rhat: f64,
    pub ess: f64,
    pub accept_rate: Option<f64>,
    pub degenerate: bool,
}

/// A named quantity's draws per chain and its block's acceptance rate.
pub type Series = (String, Vec<Vec<f64>>, Option<f64>);

/// R-hat, ESS and the updating block's acceptance rate for each named series.
pub fn diagnose_series(series: &[Series]) -> Result<Vec<ParamDiagnostics>> {
    series
        .iter()
        .map(|(name, chains, accept)| {
            let refs: Vec<&[f64]> = chains.iter().map(|c| c.as_slice()).collect();
            let r = rhat(&refs)?;
            let e = ess(&refs)?;
            Ok(ParamDiagnostics {
                param: name.clone(),
                rhat: r.value,
                ess: e.value,
                accept_rate: *accept,
                degenerate: r.degenerate || e.degenerate,
            })
        })
        .collect()
}

pub fn diagnose(draws: &PosteriorDraws) -> Result<Vec<ParamDiagnostics>> {
    let series: Vec<_> = (0..draws.dim())
        .map(|p| (draws.names[p].clone(), draws.param(p), draws.accept_rate(p)))
        .collect();
    diagnose_series(&series)
}

/// Fraction of non-degenerate series whose R-hat exceeds `threshold`.
pub fn fraction_above(diags: &[ParamDiagnostics], threshold: f64) -> f64 {
    let live: Vec<_> = diags.iter().filter(|d| !d.degenerate).collect();
    if live.is_empty() {
        return 0.0;
    }
    live.iter().filter(|d| d.rhat > threshold).count() as f64 / live.len() as f64
}
