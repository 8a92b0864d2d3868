//! County-level disaggregation of the state totals.
//!
//! Within each state-year the county linear predictors go through a softmax,
//! so the allocated expected counts `mu = rho * y_tilde` always add up to the
//! state total. The linear predictor carries a population log offset, five
//! covariates, a BYM spatial effect (ICAR plus unstructured), a per-county
//! random walk over years and a state intercept anchored at the stage-one
//! estimate. Only summaries from stage one enter here; nothing flows back.

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::csvio;
use crate::error::{Error, Result};
use crate::geo::{GeoHierarchy, NeighborStructure};
use crate::panel::{CountyCounts, CountyPanel, YearGrid};
use crate::sampler::diagnostics::{diagnose_series, ParamDiagnostics};
use crate::sampler::{self, Block, McmcConfig, ParamSpace, PosteriorDraws, Transform};
use crate::state_model::StageOnePosterior;
use crate::stats::{gamma_ln_pdf, ln_factorial, normal_ln_pdf, normal_ln_pdf_prec, quantiles, LN_2PI};

pub const N_COUNTY_COVARIATES: usize = 5;

/// Laplacian modes per component that get their own move.
const SMOOTH_MODES: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CountyHyper {
    /// Variance of the normal priors on the intercept and coefficients.
    pub fixed_effect_variance: f64,
    pub tau_shape: f64,
    pub tau_rate: f64,
}

impl Default for CountyHyper {
    fn default() -> Self {
        Self {
            fixed_effect_variance: 1.0,
            tau_shape: 1.0,
            tau_rate: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageTwoParams {
    pub alpha: f64,
    pub beta: [f64; N_COUNTY_COVARIATES],
    /// Per state.
    pub gamma: Vec<f64>,
    /// Per county.
    pub u_str: Vec<f64>,
    pub u_unstr: Vec<f64>,
    /// `county * n_years + year`.
    pub delta: Vec<f64>,
    pub tau_u: f64,
    pub tau_v: f64,
    pub tau_delta: f64,
}

impl StageTwoParams {
    pub fn zeros(n_states: usize, n_counties: usize, n_years: usize) -> Self {
        Self {
            alpha: 0.0,
            beta: [0.0; N_COUNTY_COVARIATES],
            gamma: vec![0.0; n_states],
            u_str: vec![0.0; n_counties],
            u_unstr: vec![0.0; n_counties],
            delta: vec![0.0; n_counties * n_years],
            tau_u: 1.0,
            tau_v: 1.0,
            tau_delta: 1.0,
        }
    }
}

/// `ln(y_tilde) + ln(N_c) - ln(sum N)` for the counties of one state-year.
pub fn population_log_offset(county_pops: &[f64], y_tilde: f64) -> Result<Vec<f64>> {
    if county_pops.iter().any(|&n| !(n > 0.0)) {
        return Err(Error::Domain("county populations must be positive".into()));
    }
    if !(y_tilde > 0.0) {
        return Err(Error::Domain(format!("state total must be positive, got {y_tilde}")));
    }
    let ln_total = county_pops.iter().sum::<f64>().ln();
    let ln_y = y_tilde.ln();
    Ok(county_pops.iter().map(|n| ln_y + n.ln() - ln_total).collect())
}

/// `offset + alpha + beta . x + u_str + u_unstr + delta[c, t] + gamma[state]`.
pub fn county_linear_predictor(
    params: &StageTwoParams,
    panel: &CountyPanel,
    offset: f64,
    state: usize,
    c: usize,
    t: usize,
) -> f64 {
    let cov = &panel.covariates;
    let mut eta = offset + params.alpha;
    for (j, b) in params.beta.iter().enumerate() {
        eta += b * cov.get(j, c, t);
    }
    eta + params.u_str[c] + params.u_unstr[c] + params.delta[panel.cell(c, t)] + params.gamma[state]
}

/// Max-subtracted softmax.
pub fn softmax_allocation(eta: &[f64]) -> Result<Vec<f64>> {
    if eta.is_empty() {
        return Err(Error::Empty("softmax over no counties".into()));
    }
    let max = eta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || !max.is_finite() {
        return Err(Error::DegenerateSoftmax);
    }
    let mut rho: Vec<f64> = eta.iter().map(|e| (e - max).exp()).collect();
    let total: f64 = rho.iter().sum();
    for r in &mut rho {
        *r /= total;
    }
    Ok(rho)
}

pub fn expected_counts(rho: &[f64], y_tilde: f64) -> Vec<f64> {
    rho.iter().map(|r| r * y_tilde).collect()
}

pub fn county_risk(mu: f64, county_pop: f64) -> f64 {
    mu / county_pop
}

/// BYM log prior split into its parts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BymLogPrior {
    /// `-(tau_u / 2) * sum over edges of (u_c - u_c')^2`.
    pub icar_kernel: f64,
    /// `(rank / 2) * ln(tau_u)`; the `2 pi` part is constant and left out.
    pub icar_normalizer: f64,
    /// `sum of ln N(u_unstr_c | 0, 1 / tau_v)`.
    pub unstructured: f64,
}

impl BymLogPrior {
    pub fn total(&self) -> f64 {
        self.icar_kernel + self.icar_normalizer + self.unstructured
    }
}

pub fn bym_log_prior(
    u_str: &[f64],
    u_unstr: &[f64],
    tau_u: f64,
    tau_v: f64,
    structure: &NeighborStructure,
) -> Result<BymLogPrior> {
    if !(tau_u > 0.0 && tau_v > 0.0) {
        return Err(Error::Domain(format!(
            "BYM precisions must be positive, got tau_u = {tau_u}, tau_v = {tau_v}"
        )));
    }
    Ok(bym_parts(u_str, u_unstr, tau_u, tau_v, structure))
}

#[inline]
fn bym_parts(u_str: &[f64], u_unstr: &[f64], tau_u: f64, tau_v: f64, structure: &NeighborStructure) -> BymLogPrior {
    let ss: f64 = structure
        .edges
        .iter()
        .map(|&(a, b)| (u_str[a] - u_str[b]).powi(2))
        .sum();
    BymLogPrior {
        icar_kernel: -0.5 * tau_u * ss,
        icar_normalizer: 0.5 * structure.rank() as f64 * tau_u.ln(),
        unstructured: u_unstr.iter().map(|&u| normal_ln_pdf_prec(u, 0.0, tau_v)).sum(),
    }
}

/// Sum of the `T - 1` increment densities of one county's series.
pub fn rw1_county_log_prior(series: &[f64], tau_delta: f64) -> Result<f64> {
    if !(tau_delta > 0.0) {
        return Err(Error::Domain(format!(
            "random-walk precision must be positive, got {tau_delta}"
        )));
    }
    Ok(rw1_increments(series, tau_delta))
}

#[inline]
fn rw1_increments(series: &[f64], tau: f64) -> f64 {
    series.windows(2).map(|w| normal_ln_pdf_prec(w[1], w[0], tau)).sum()
}

/// `ln N(gamma | omega_tilde, omega_sd^2)`. A zero sd pins `gamma` to
/// `omega_tilde` and is reported as [`Error::DegenerateAnchor`].
pub fn gamma_anchor_log_prior(gamma: f64, omega_tilde: f64, omega_sd: f64) -> Result<f64> {
    if omega_sd == 0.0 {
        return Err(Error::DegenerateAnchor);
    }
    if !(omega_sd > 0.0) {
        return Err(Error::Domain(format!(
            "state effect sd must be positive, got {omega_sd}"
        )));
    }
    Ok(normal_ln_pdf(gamma, omega_tilde, omega_sd * omega_sd))
}

/// Conditional-Poisson and multinomial probabilities of `counts`.
///
/// The first value enumerates every allocation of `total` over the counties,
/// weighs each by its independent Poisson probability and normalizes. The
/// second is the multinomial pmf with probabilities `lambda / sum(lambda)`.
pub fn poisson_conditional_equivalence(lambdas: &[f64], total: u64, counts: &[u64]) -> Result<(f64, f64)> {
    let got: u64 = counts.iter().sum();
    if got != total {
        return Err(Error::CountSumMismatch { expected: total, got });
    }
    if lambdas.len() != counts.len() || lambdas.is_empty() {
        return Err(Error::Validation(vec![
            "lambdas and counts must be non-empty and of equal length".into(),
        ]));
    }
    if lambdas.iter().any(|&l| !(l > 0.0)) {
        return Err(Error::Domain("Poisson means must be positive".into()));
    }
    let joint = |ks: &[u64]| -> f64 {
        ks.iter()
            .zip(lambdas)
            .map(|(&k, &l)| crate::stats::poisson_ln_pmf(k, l))
            .sum::<f64>()
            .exp()
    };
    let mut normalizer = 0.0;
    let mut current = vec![0u64; counts.len()];
    enumerate_compositions(total, 0, &mut current, &mut |ks| normalizer += joint(ks));
    let conditional = joint(counts) / normalizer;

    let sum: f64 = lambdas.iter().sum();
    let mut ln_multi = ln_factorial(total);
    for (&k, &l) in counts.iter().zip(lambdas) {
        ln_multi += k as f64 * (l / sum).ln() - ln_factorial(k);
    }
    Ok((conditional, ln_multi.exp()))
}

fn enumerate_compositions(remaining: u64, at: usize, current: &mut [u64], f: &mut impl FnMut(&[u64])) {
    if at + 1 == current.len() {
        current[at] = remaining;
        f(current);
        return;
    }
    for k in 0..=remaining {
        current[at] = k;
        enumerate_compositions(remaining - k, at + 1, current, f);
    }
}

/// Everything the stage-two density needs besides the parameters.
#[derive(Debug, Clone)]
pub struct StageTwoData {
    pub panel: CountyPanel,
    pub state_ids: Vec<String>,
    /// State index of each county.
    pub state_of: Vec<usize>,
    pub counties_in: Vec<Vec<usize>>,
    pub structure: NeighborStructure,
    /// `state * n_years + year`.
    pub y_tilde: Vec<f64>,
    pub omega_tilde: Vec<f64>,
    pub omega_sd: Vec<f64>,
    pub counts: Option<CountyCounts>,
}

impl StageTwoData {
    pub fn new(
        panel: CountyPanel,
        geo: &GeoHierarchy,
        stage1: &StageOnePosterior,
        counts: Option<CountyCounts>,
    ) -> Result<Self> {
        let mut problems = Vec::new();
        if panel.county_ids != geo.county_ids() {
            problems.push("county panel does not follow the geography's county order".into());
        }
        if stage1.state_ids != geo.state_ids() {
            problems.push("stage-one summaries do not follow the geography's state order".into());
        }
        if stage1.grid != panel.grid {
            problems.push("stage-one year grid differs from the county panel's".into());
        }
        if panel.covariates.n_covariates() != N_COUNTY_COVARIATES {
            problems.push(format!("expected {N_COUNTY_COVARIATES} county covariates"));
        }
        if !panel.covariates.all_finite() {
            problems.push("county covariates must be complete before fitting".into());
        }
        if let Some(c) = &counts {
            if c.counts.len() != panel.population.len() {
                problems.push("county counts do not cover the county panel".into());
            }
        }
        if stage1.y_tilde.iter().any(|&y| !(y > 0.0 && y.is_finite())) {
            problems.push("stage-one totals must be positive and finite".into());
        }
        if !problems.is_empty() {
            return Err(Error::Validation(problems));
        }
        Ok(Self {
            state_of: (0..geo.n_counties()).map(|c| geo.state_of(c)).collect(),
            counties_in: (0..geo.n_states()).map(|s| geo.counties_in(s).to_vec()).collect(),
            structure: crate::geo::build_icar_structure(geo),
            state_ids: stage1.state_ids.clone(),
            y_tilde: stage1.y_tilde.clone(),
            omega_tilde: stage1.omega_median.clone(),
            omega_sd: stage1.omega_sd.clone(),
            panel,
            counts,
        })
    }

    pub fn grid(&self) -> YearGrid {
        self.panel.grid
    }

    pub fn n_states(&self) -> usize {
        self.counties_in.len()
    }

    pub fn n_counties(&self) -> usize {
        self.state_of.len()
    }

    pub fn n_years(&self) -> usize {
        self.panel.grid.n_years()
    }

    /// Log offsets for every county cell.
    pub fn offsets(&self) -> Result<Vec<f64>> {
        let t_n = self.n_years();
        let mut out = vec![0.0; self.n_counties() * t_n];
        for (s, counties) in self.counties_in.iter().enumerate() {
            for t in 0..t_n {
                let pops: Vec<f64> = counties.iter().map(|&c| self.panel.population(c, t) as f64).collect();
                let off = population_log_offset(&pops, self.y_tilde[s * t_n + t])?;
                for (&c, o) in counties.iter().zip(off) {
                    out[c * t_n + t] = o;
                }
            }
        }
        Ok(out)
    }

    /// Allocation shares for every county cell.
    pub fn allocation(&self, params: &StageTwoParams) -> Result<Vec<f64>> {
        let offsets = self.offsets()?;
        let t_n = self.n_years();
        let mut rho = vec![0.0; self.n_counties() * t_n];
        for (s, counties) in self.counties_in.iter().enumerate() {
            if counties.is_empty() {
                continue;
            }
            for t in 0..t_n {
                let eta: Vec<f64> = counties
                    .iter()
                    .map(|&c| county_linear_predictor(params, &self.panel, offsets[c * t_n + t], s, c, t))
                    .collect();
                for (&c, r) in counties.iter().zip(softmax_allocation(&eta)?) {
                    rho[c * t_n + t] = r;
                }
            }
        }
        Ok(rho)
    }
}

/// Stage-two log posterior: Poisson terms for observed county counts with
/// means `rho * y_tilde`, BYM and random-walk priors, the state anchors,
/// normal fixed-effect priors and Gamma hyperpriors. States whose anchor sd
/// is zero have their intercept pinned and contribute no anchor term.
pub fn stage2_log_posterior(params: &StageTwoParams, data: &StageTwoData, hyper: &CountyHyper) -> Result<f64> {
    let t_n = data.n_years();
    let mut lp = 0.0;
    if let Some(counts) = &data.counts {
        let rho = data.allocation(params)?;
        for c in 0..data.n_counties() {
            let s = data.state_of[c];
            for t in 0..t_n {
                let mu = rho[c * t_n + t] * data.y_tilde[s * t_n + t];
                lp += crate::stats::poisson_ln_pmf(counts.get(c, t), mu);
            }
        }
    }
    lp += normal_ln_pdf(params.alpha, 0.0, hyper.fixed_effect_variance);
    for b in params.beta {
        lp += normal_ln_pdf(b, 0.0, hyper.fixed_effect_variance);
    }
    for s in 0..data.n_states() {
        match gamma_anchor_log_prior(params.gamma[s], data.omega_tilde[s], data.omega_sd[s]) {
            Ok(v) => lp += v,
            Err(Error::DegenerateAnchor) => {
                if params.gamma[s] != data.omega_tilde[s] {
                    return Ok(f64::NEG_INFINITY);
                }
            }
            Err(e) => return Err(e),
        }
    }
    lp += bym_log_prior(
        &params.u_str,
        &params.u_unstr,
        params.tau_u,
        params.tau_v,
        &data.structure,
    )?
    .total();
    for c in 0..data.n_counties() {
        lp += rw1_county_log_prior(&params.delta[c * t_n..(c + 1) * t_n], params.tau_delta)?;
    }
    for tau in [params.tau_u, params.tau_v, params.tau_delta] {
        lp += gamma_ln_pdf(tau, hyper.tau_shape, hyper.tau_rate);
    }
    Ok(lp)
}

/// Position of each parameter group in the flat sampler vector.
#[derive(Debug, Clone, PartialEq)]
pub struct CountyLayout {
    pub n_states: usize,
    pub n_counties: usize,
    pub n_years: usize,
    pub gamma: usize,
    pub u_str: usize,
    pub u_unstr: usize,
    pub delta: usize,
    pub tau_u: usize,
    pub tau_v: usize,
    pub tau_delta: usize,
    pub dim: usize,
}

impl CountyLayout {
    pub const ALPHA: usize = 0;
    pub const BETA: usize = 1;

    fn new(n_states: usize, n_counties: usize, n_years: usize) -> Self {
        let gamma = 1 + N_COUNTY_COVARIATES;
        let u_str = gamma + n_states;
        let u_unstr = u_str + n_counties;
        let delta = u_unstr + n_counties;
        let tau_u = delta + n_counties * n_years;
        Self {
            n_states,
            n_counties,
            n_years,
            gamma,
            u_str,
            u_unstr,
            delta,
            tau_u,
            tau_v: tau_u + 1,
            tau_delta: tau_u + 2,
            dim: tau_u + 3,
        }
    }

    pub fn unpack(&self, x: &[f64]) -> StageTwoParams {
        let mut beta = [0.0; N_COUNTY_COVARIATES];
        beta.copy_from_slice(&x[Self::BETA..Self::BETA + N_COUNTY_COVARIATES]);
        StageTwoParams {
            alpha: x[Self::ALPHA],
            beta,
            gamma: x[self.gamma..self.u_str].to_vec(),
            u_str: x[self.u_str..self.u_unstr].to_vec(),
            u_unstr: x[self.u_unstr..self.delta].to_vec(),
            delta: x[self.delta..self.tau_u].to_vec(),
            tau_u: x[self.tau_u],
            tau_v: x[self.tau_v],
            tau_delta: x[self.tau_delta],
        }
    }

    pub fn pack(&self, p: &StageTwoParams) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.dim);
        x.push(p.alpha);
        x.extend_from_slice(&p.beta);
        x.extend_from_slice(&p.gamma);
        x.extend_from_slice(&p.u_str);
        x.extend_from_slice(&p.u_unstr);
        x.extend_from_slice(&p.delta);
        x.extend([p.tau_u, p.tau_v, p.tau_delta]);
        x
    }
}

/// Stage-two posterior as a sampler target.
#[derive(Debug, Clone)]
pub struct CountyModel {
    pub data: StageTwoData,
    pub hyper: CountyHyper,
    pub layout: CountyLayout,
    /// Population part of the offset, `ln N_c - ln sum N`, per cell.
    ln_share: Vec<f64>,
    ln_y_tilde: Vec<f64>,
    cell_covariates: Vec<[f64; N_COUNTY_COVARIATES]>,
    /// Observed counts as reals, per cell, and their state-year totals.
    counts: Option<(Vec<f64>, Vec<f64>)>,
    /// Terms of the likelihood that do not depend on the parameters.
    likelihood_const: f64,
    pinned: Vec<bool>,
    ln_omega_sd: Vec<f64>,
    rank: f64,
    n_increments: f64,
    gamma_const: f64,
}

impl CountyModel {
    pub fn new(data: StageTwoData, hyper: CountyHyper) -> Result<Self> {
        let layout = CountyLayout::new(data.n_states(), data.n_counties(), data.n_years());
        let t_n = data.n_years();
        let mut ln_share = vec![0.0; data.n_counties() * t_n];
        for counties in &data.counties_in {
            for t in 0..t_n {
                let pops: Vec<f64> = counties.iter().map(|&c| data.panel.population(c, t) as f64).collect();
                let off = population_log_offset(&pops, 1.0)?;
                for (&c, o) in counties.iter().zip(off) {
                    ln_share[c * t_n + t] = o;
                }
            }
        }
        let ln_y_tilde: Vec<f64> = data.y_tilde.iter().map(|y| y.ln()).collect();
        // with mu = rho * y_tilde the Poisson terms of a state-year reduce to
        // sum(k * eta) - K * logsumexp(eta) + K * ln(y_tilde) - y_tilde - sum(ln k!)
        let mut likelihood_const = 0.0;
        let counts = data.counts.as_ref().map(|cc| {
            let k: Vec<f64> = cc.counts.iter().map(|&v| v as f64).collect();
            let mut totals = vec![0.0; data.n_states() * t_n];
            for (s, counties) in data.counties_in.iter().enumerate() {
                for t in 0..t_n {
                    let st = s * t_n + t;
                    for &c in counties {
                        totals[st] += k[c * t_n + t];
                        likelihood_const -= ln_factorial(cc.counts[c * t_n + t]);
                    }
                    if !counties.is_empty() {
                        likelihood_const += totals[st] * ln_y_tilde[st] - data.y_tilde[st];
                    }
                }
            }
            (k, totals)
        });
        let pinned = data.omega_sd.iter().map(|&sd| sd == 0.0).collect();
        let cell_covariates = (0..data.n_counties() * t_n)
            .map(|cell| std::array::from_fn(|j| data.panel.covariates.columns[j][cell]))
            .collect();
        let ln_omega_sd = data.omega_sd.iter().map(|sd| sd.ln()).collect();
        Ok(Self {
            rank: data.structure.rank() as f64,
            n_increments: (data.n_counties() * t_n.saturating_sub(1)) as f64,
            gamma_const: hyper.tau_shape * hyper.tau_rate.ln() - statrs::function::gamma::ln_gamma(hyper.tau_shape),
            ln_y_tilde,
            cell_covariates,
            data,
            hyper,
            layout,
            ln_share,
            counts,
            likelihood_const,
            pinned,
            ln_omega_sd,
        })
    }

    pub fn param_space(&self) -> ParamSpace {
        let d = &self.data;
        let county_ids = &d.panel.county_ids;
        let mut space = ParamSpace::default();
        space.push("alpha", Transform::Identity);
        for j in 1..=N_COUNTY_COVARIATES {
            space.push(format!("beta[{j}]"), Transform::Identity);
        }
        for id in &d.state_ids {
            space.push(format!("gamma[{id}]"), Transform::Identity);
        }
        for id in county_ids {
            space.push(format!("u_str[{id}]"), Transform::Identity);
        }
        for id in county_ids {
            space.push(format!("u_unstr[{id}]"), Transform::Identity);
        }
        for id in county_ids {
            for year in d.grid().years() {
                space.push(format!("delta[{id},{year}]"), Transform::Identity);
            }
        }
        space.push("tau_u", Transform::Log);
        space.push("tau_v", Transform::Log);
        space.push("tau_delta", Transform::Log);
        space
    }

    /// Blocks: the intercept and each coefficient, each free state
    /// intercept, the structured effect moved along each edge (which keeps
    /// its sum), each county's unstructured effect, each county's temporal
    /// series with its sum held fixed, and the three precisions. On top of
    /// these come moves along flat or nearly flat directions: structured
    /// against unstructured effect on each edge, the smoothest structured
    /// patterns alone and against the unstructured effects, each precision
    /// against the
    /// scale of its effects, a coefficient against the county effects that
    /// reproduce its covariate, a common shift of a state's unstructured
    /// effects, and a common zero-sum year pattern in a state's temporal
    /// effects (both cancel in the softmax).
    pub fn blocks(&self) -> Vec<Block> {
        let l = &self.layout;
        let d = &self.data;
        let t_n = l.n_years;
        let ids = &d.panel.county_ids;
        let mut blocks = vec![Block::scalar("alpha", CountyLayout::ALPHA).with_step(1.0)];
        for j in 0..N_COUNTY_COVARIATES {
            blocks.push(Block::scalar(format!("beta[{}]", j + 1), CountyLayout::BETA + j));
        }
        for s in 0..l.n_states {
            if !self.pinned[s] {
                blocks.push(Block::scalar(format!("gamma#{s}"), l.gamma + s).with_step(0.5));
            }
        }
        for &(a, b) in &d.structure.edges {
            let weights = vec![(l.u_str + a, 1.0), (l.u_str + b, -1.0)];
            blocks.push(Block::direction(format!("u_str[{},{}]", ids[a], ids[b]), weights));
        }
        for (c, id) in ids.iter().enumerate() {
            blocks.push(Block::scalar(format!("u_unstr[{id}]"), l.u_unstr + c));
        }
        if t_n > 1 {
            for (c, id) in ids.iter().enumerate() {
                let coords = (l.delta + c * t_n..l.delta + (c + 1) * t_n).collect();
                blocks.push(Block::sum_preserving(format!("delta[{id}]"), coords));
            }
        }
        blocks.push(Block::scalar("tau_u", l.tau_u).with_step(0.5));
        blocks.push(Block::scalar("tau_v", l.tau_v).with_step(0.5));
        if t_n > 1 {
            blocks.push(Block::scalar("tau_delta", l.tau_delta).with_step(0.5));
        }

        let cov = &d.panel.covariates;
        for j in 0..N_COUNTY_COVARIATES {
            let mut weights = vec![(CountyLayout::BETA + j, 1.0)];
            for c in 0..l.n_counties {
                let xs: Vec<f64> = (0..t_n).map(|t| cov.get(j, c, t)).collect();
                let m = crate::stats::mean(&xs);
                weights.push((l.u_unstr + c, -m));
                if t_n > 1 {
                    for (t, x) in xs.iter().enumerate() {
                        weights.push((l.delta + c * t_n + t, m - x));
                    }
                }
            }
            blocks.push(
                Block::direction(format!("ridge-beta[{}]", j + 1), weights)
                    .with_terms(self.prior_terms(&[FIXED_TERM, UNSTR_TERM, RW1_TERM])),
            );
        }
        for &(a, b) in &d.structure.edges {
            let weights = vec![
                (l.u_str + a, 1.0),
                (l.u_str + b, -1.0),
                (l.u_unstr + a, -1.0),
                (l.u_unstr + b, 1.0),
            ];
            blocks.push(
                Block::direction(format!("swap-u[{},{}]", ids[a], ids[b]), weights)
                    .with_terms(self.prior_terms(&[ICAR_TERM, UNSTR_TERM])),
            );
        }
        // the smoothest patterns move slowly under edge moves
        for (k, modes) in d.structure.laplacian_modes().iter().enumerate() {
            for (m, mode) in modes.iter().take(SMOOTH_MODES).enumerate() {
                let along: Vec<(usize, f64)> = mode.loadings.iter().map(|&(c, v)| (l.u_str + c, v)).collect();
                let mut swap = along.clone();
                swap.extend(mode.loadings.iter().map(|&(c, v)| (l.u_unstr + c, -v)));
                blocks.push(Block::direction(format!("mode-u_str#{k},{m}"), along));
                blocks.push(
                    Block::direction(format!("mode-swap#{k},{m}"), swap)
                        .with_terms(self.prior_terms(&[ICAR_TERM, UNSTR_TERM])),
                );
            }
        }
        // a precision against the spread of its effects, leaving the
        // quadratic form unchanged
        let mut scales = vec![("scale-u_str", l.u_str..l.u_unstr, l.tau_u)];
        scales.push(("scale-u_unstr", l.u_unstr..l.delta, l.tau_v));
        if t_n > 1 {
            scales.push(("scale-delta", l.delta..l.tau_u, l.tau_delta));
        }
        for (name, range, tau) in scales {
            let mult = range.map(|i| (i, 1.0)).chain([(tau, -2.0)]).collect();
            blocks.push(Block::direction_mixed(name, vec![], mult).with_step(0.1));
        }
        for (s, counties) in d.counties_in.iter().enumerate() {
            if counties.len() < 2 {
                continue;
            }
            let weights = counties.iter().map(|&c| (l.u_unstr + c, 1.0)).collect();
            blocks.push(
                Block::direction(format!("shift-u_unstr#{s}"), weights).with_terms(self.prior_terms(&[UNSTR_TERM])),
            );
            if t_n > 1 {
                for t in 0..t_n {
                    let mut weights = Vec::with_capacity(counties.len() * t_n);
                    for &c in counties {
                        for k in 0..t_n {
                            let w = if k == t { 1.0 } else { 0.0 } - 1.0 / t_n as f64;
                            weights.push((l.delta + c * t_n + k, w));
                        }
                    }
                    blocks.push(
                        Block::direction(format!("shift-delta#{s},{t}"), weights)
                            .with_terms(self.prior_terms(&[RW1_TERM])),
                    );
                }
            }
        }
        blocks
    }

    /// Per-chain starting points: fixed effects from `N(0, 0.1)`, state
    /// intercepts at their anchors, random effects near zero (respecting the
    /// sum constraints) and precisions near their prior mean.
    pub fn initial_values(&self, seed: u64, chains: usize) -> Vec<Vec<f64>> {
        let l = &self.layout;
        let d = &self.data;
        (0..chains)
            .map(|chain| {
                let mut rng = sampler::stream_rng(seed ^ 0x5eed_0002, chain as u64);
                let mut normal = |sd: f64| sd * rng.sample::<f64, _>(StandardNormal);
                let mut p = StageTwoParams::zeros(l.n_states, l.n_counties, l.n_years);
                p.alpha = normal(0.1f64.sqrt());
                for b in &mut p.beta {
                    *b = normal(0.1f64.sqrt());
                }
                for s in 0..l.n_states {
                    p.gamma[s] = d.omega_tilde[s];
                    if !self.pinned[s] {
                        p.gamma[s] += normal(d.omega_sd[s].min(1.0) * 0.1);
                    }
                }
                for comp in &d.structure.components {
                    let draws: Vec<f64> = comp.iter().map(|_| normal(0.01)).collect();
                    let m = crate::stats::mean(&draws);
                    for (&c, v) in comp.iter().zip(draws) {
                        p.u_str[c] = v - m;
                    }
                }
                for u in &mut p.u_unstr {
                    *u = normal(0.01);
                }
                let t_n = l.n_years;
                for c in 0..l.n_counties {
                    let draws: Vec<f64> = (0..t_n).map(|_| normal(0.01)).collect();
                    let m = crate::stats::mean(&draws);
                    for (t, v) in draws.into_iter().enumerate() {
                        p.delta[c * t_n + t] = if t_n > 1 { v - m } else { 0.0 };
                    }
                }
                let prior_mean = self.hyper.tau_shape / self.hyper.tau_rate;
                p.tau_u = prior_mean * normal(0.1).exp();
                p.tau_v = prior_mean * normal(0.1).exp();
                p.tau_delta = prior_mean * normal(0.1).exp();
                l.pack(&p)
            })
            .collect()
    }

    /// Allocation shares from a flat parameter vector, written into `rho`.
    fn shares_into(&self, x: &[f64], rho: &mut [f64]) {
        let l = &self.layout;
        let t_n = l.n_years;
        let cov = &self.data.panel.covariates;
        for (s, counties) in self.data.counties_in.iter().enumerate() {
            for t in 0..t_n {
                let mut max = f64::NEG_INFINITY;
                for &c in counties {
                    let cell = c * t_n + t;
                    let mut eta = self.ln_y_tilde[s * t_n + t] + self.ln_share[cell] + x[0];
                    for j in 0..N_COUNTY_COVARIATES {
                        eta += x[1 + j] * cov.columns[j][cell];
                    }
                    eta += x[l.u_str + c] + x[l.u_unstr + c] + x[l.delta + cell] + x[l.gamma + s];
                    rho[cell] = eta;
                    max = max.max(eta);
                }
                let mut total = 0.0;
                for &c in counties {
                    let cell = c * t_n + t;
                    rho[cell] = (rho[cell] - max).exp();
                    total += rho[cell];
                }
                for &c in counties {
                    rho[c * t_n + t] /= total;
                }
            }
        }
    }

    /// Allocation shares for every retained draw: `[chain][draw][cell]`.
    pub fn share_draws(&self, draws: &PosteriorDraws) -> Vec<Vec<Vec<f64>>> {
        let cells = self.layout.n_counties * self.layout.n_years;
        draws.map_draws(|x| {
            let mut rho = vec![0.0; cells];
            self.shares_into(x, &mut rho);
            rho
        })
    }

    pub fn fit(&self, config: &McmcConfig) -> Result<StageTwoFit> {
        let space = self.param_space();
        let init = self.initial_values(config.seed, config.chains);
        let draws = sampler::run_chains(self, &space, &init, &self.blocks(), config)?;
        let shares = self.share_draws(&draws);
        let posterior = self.summarize(&shares)?;
        let diagnostics = self.diagnostics(&draws, &shares)?;
        Ok(StageTwoFit {
            posterior,
            diagnostics,
            draws,
        })
    }

    /// Checks that the allocated counts of every draw add up to the state
    /// total within `1e-9` relative, and returns the largest deviation.
    pub fn check_allocation(&self, shares: &[Vec<Vec<f64>>]) -> Result<f64> {
        let d = &self.data;
        let t_n = d.n_years();
        let mut worst = 0.0f64;
        for draw in shares.iter().flatten() {
            for (s, counties) in d.counties_in.iter().enumerate() {
                if counties.is_empty() {
                    continue;
                }
                for t in 0..t_n {
                    let y = d.y_tilde[s * t_n + t];
                    let rho: Vec<f64> = counties.iter().map(|&c| draw[c * t_n + t]).collect();
                    let total: f64 = expected_counts(&rho, y).iter().sum();
                    worst = worst.max(((total - y) / y).abs());
                }
            }
        }
        if worst > 1e-9 {
            return Err(Error::Validation(vec![format!(
                "allocated counts deviate from state totals by {worst:e} (relative)"
            )]));
        }
        Ok(worst)
    }

    pub fn summarize(&self, shares: &[Vec<Vec<f64>>]) -> Result<CountyPosterior> {
        self.check_allocation(shares)?;
        let d = &self.data;
        let t_n = d.n_years();
        let cells = d.n_counties() * t_n;
        let probs = [0.025, 0.5, 0.975];
        let mut out = CountyPosterior {
            grid: d.grid(),
            county_ids: d.panel.county_ids.clone(),
            rho_median: Vec::with_capacity(cells),
            mu_median: Vec::with_capacity(cells),
            pi_median: Vec::with_capacity(cells),
            pi_lo: Vec::with_capacity(cells),
            pi_hi: Vec::with_capacity(cells),
        };
        for cell in 0..cells {
            let (c, t) = (cell / t_n, cell % t_n);
            let y = d.y_tilde[d.state_of[c] * t_n + t];
            let n = d.panel.population(c, t) as f64;
            let rho: Vec<f64> = shares.iter().flatten().map(|draw| draw[cell]).collect();
            let pi: Vec<f64> = rho.iter().map(|r| county_risk(r * y, n)).collect();
            out.rho_median.push(quantiles(&rho, &[0.5])?[0]);
            out.mu_median.push(y);
            let q = quantiles(&pi, &probs)?;
            out.pi_lo.push(q[0]);
            out.pi_median.push(q[1]);
            out.pi_hi.push(q[2]);
        }
        // marginal medians need not add up to one; rescale them within each
        // state-year so the exported allocation stays coherent
        for counties in &d.counties_in {
            for t in 0..t_n {
                let total: f64 = counties.iter().map(|&c| out.rho_median[c * t_n + t]).sum();
                for &c in counties {
                    let cell = c * t_n + t;
                    out.rho_median[cell] /= total;
                    out.mu_median[cell] *= out.rho_median[cell];
                }
            }
        }
        Ok(out)
    }

    /// Monitored quantities: coefficients, precisions, and the log
    /// allocation share of every county cell.
    pub fn diagnostics(&self, draws: &PosteriorDraws, shares: &[Vec<Vec<f64>>]) -> Result<Vec<ParamDiagnostics>> {
        let l = &self.layout;
        let mut series = Vec::new();
        let mut monitored: Vec<usize> = (CountyLayout::BETA..CountyLayout::BETA + N_COUNTY_COVARIATES).collect();
        monitored.extend([l.tau_u, l.tau_v]);
        if l.n_years > 1 {
            monitored.push(l.tau_delta);
        }
        for p in monitored {
            series.push((draws.names[p].clone(), draws.param(p), draws.accept_rate(p)));
        }
        let d = &self.data;
        let t_n = l.n_years;
        for c in 0..l.n_counties {
            if d.counties_in[d.state_of[c]].len() < 2 {
                continue;
            }
            for t in 0..t_n {
                let cell = c * t_n + t;
                let chains = shares
                    .iter()
                    .map(|chain| chain.iter().map(|draw| draw[cell].ln()).collect())
                    .collect();
                let name = format!("log_rho[{},{}]", d.panel.county_ids[c], d.grid().year(t));
                series.push((name, chains, draws.accept_rate(l.u_unstr + c)));
            }
        }
        diagnose_series(&series)
    }
}

thread_local! {
    static ETA: std::cell::RefCell<Vec<f64>> = const { std::cell::RefCell::new(Vec::new()) };
}

impl CountyModel {
    /// Poisson terms of one state without their constant.
    fn state_likelihood(&self, s: usize, x: &[f64]) -> f64 {
        let Some((k, totals)) = &self.counts else {
            return 0.0;
        };
        let l = &self.layout;
        let t_n = l.n_years;
        let beta = &x[CountyLayout::BETA..CountyLayout::BETA + N_COUNTY_COVARIATES];
        let counties = &self.data.counties_in[s];
        if counties.is_empty() {
            return 0.0;
        }
        ETA.with(|buf| {
            let mut eta = buf.borrow_mut();
            eta.clear();
            eta.resize(counties.len(), 0.0);
            let mut ll = 0.0;
            for t in 0..t_n {
                let mut max = f64::NEG_INFINITY;
                for (i, &c) in counties.iter().enumerate() {
                    let cell = c * t_n + t;
                    let xs = &self.cell_covariates[cell];
                    let mut e = self.ln_share[cell] + x[l.u_str + c] + x[l.u_unstr + c] + x[l.delta + cell];
                    for j in 0..N_COUNTY_COVARIATES {
                        e += beta[j] * xs[j];
                    }
                    eta[i] = e;
                    max = max.max(e);
                    ll += k[cell] * e;
                }
                let sum: f64 = eta.iter().map(|e| (e - max).exp()).sum();
                ll -= totals[s * t_n + t] * (max + sum.ln());
            }
            ll
        })
    }

    fn prior_terms(&self, which: &[usize]) -> Vec<usize> {
        which.iter().map(|k| self.layout.n_states + k).collect()
    }

    fn taus(&self, x: &[f64]) -> (f64, f64, f64) {
        let l = &self.layout;
        (x[l.tau_u], x[l.tau_v], x[l.tau_delta])
    }
}

// Term layout: one likelihood term per state, then the priors on the fixed
// effects, the state intercepts, the structured, unstructured and temporal
// effects, and the precisions.
const FIXED_TERM: usize = 0;
const GAMMA_TERM: usize = 1;
const ICAR_TERM: usize = 2;
const UNSTR_TERM: usize = 3;
const RW1_TERM: usize = 4;
const TAU_TERM: usize = 5;
const N_PRIOR_TERMS: usize = 6;

impl sampler::LogDensity for CountyModel {
    fn log_density(&self, x: &[f64]) -> f64 {
        let (tau_u, tau_v, tau_delta) = self.taus(x);
        if !(tau_u > 0.0 && tau_v > 0.0 && tau_delta > 0.0) {
            return f64::NEG_INFINITY;
        }
        (0..self.n_terms()).map(|k| self.term(k, x)).sum()
    }

    fn n_terms(&self) -> usize {
        self.layout.n_states + N_PRIOR_TERMS
    }

    fn term(&self, k: usize, x: &[f64]) -> f64 {
        let l = &self.layout;
        let d = &self.data;
        let t_n = l.n_years;
        if k < l.n_states {
            return self.state_likelihood(k, x);
        }
        let (tau_u, tau_v, tau_delta) = self.taus(x);
        match k - l.n_states {
            FIXED_TERM => {
                let v = self.hyper.fixed_effect_variance;
                let ss: f64 = x[0..=N_COUNTY_COVARIATES].iter().map(|b| b * b).sum();
                self.likelihood_const - 0.5 * (N_COUNTY_COVARIATES + 1) as f64 * (LN_2PI + v.ln()) - 0.5 * ss / v
            }
            GAMMA_TERM => {
                let mut lp = 0.0;
                for s in 0..l.n_states {
                    let g = x[l.gamma + s];
                    if self.pinned[s] {
                        if g != d.omega_tilde[s] {
                            return f64::NEG_INFINITY;
                        }
                    } else {
                        let z = (g - d.omega_tilde[s]) / d.omega_sd[s];
                        lp += -0.5 * LN_2PI - self.ln_omega_sd[s] - 0.5 * z * z;
                    }
                }
                lp
            }
            ICAR_TERM => {
                let u_str = &x[l.u_str..l.u_unstr];
                let edges: f64 = d
                    .structure
                    .edges
                    .iter()
                    .map(|&(a, b)| (u_str[a] - u_str[b]).powi(2))
                    .sum();
                -0.5 * tau_u * edges + 0.5 * self.rank * tau_u.ln()
            }
            UNSTR_TERM => {
                let ss: f64 = x[l.u_unstr..l.delta].iter().map(|u| u * u).sum();
                0.5 * l.n_counties as f64 * (tau_v.ln() - LN_2PI) - 0.5 * tau_v * ss
            }
            RW1_TERM => {
                let mut ss = 0.0;
                for c in 0..l.n_counties {
                    let series = &x[l.delta + c * t_n..l.delta + (c + 1) * t_n];
                    ss += series.windows(2).map(|w| (w[1] - w[0]).powi(2)).sum::<f64>();
                }
                0.5 * self.n_increments * (tau_delta.ln() - LN_2PI) - 0.5 * tau_delta * ss
            }
            TAU_TERM => {
                let (a, b) = (self.hyper.tau_shape, self.hyper.tau_rate);
                [tau_u, tau_v, tau_delta]
                    .iter()
                    .map(|tau| self.gamma_const + (a - 1.0) * tau.ln() - b * tau)
                    .sum()
            }
            _ => 0.0,
        }
    }

    fn terms_touching(&self, coords: &[usize]) -> Vec<usize> {
        let l = &self.layout;
        let n_s = l.n_states;
        let county = |i: usize, base: usize| self.data.state_of[i - base];
        let mut out = Vec::new();
        for &i in coords {
            if i == CountyLayout::ALPHA {
                // the intercept cancels in the softmax
                out.push(n_s + FIXED_TERM);
            } else if i < l.gamma {
                out.extend(0..n_s);
                out.push(n_s + FIXED_TERM);
            } else if i < l.u_str {
                out.push(n_s + GAMMA_TERM);
            } else if i < l.u_unstr {
                out.extend([county(i, l.u_str), n_s + ICAR_TERM]);
            } else if i < l.delta {
                out.extend([county(i, l.u_unstr), n_s + UNSTR_TERM]);
            } else if i < l.tau_u {
                out.push(self.data.state_of[(i - l.delta) / l.n_years]);
                out.push(n_s + RW1_TERM);
            } else if i == l.tau_u {
                out.extend([n_s + ICAR_TERM, n_s + TAU_TERM]);
            } else if i == l.tau_v {
                out.extend([n_s + UNSTR_TERM, n_s + TAU_TERM]);
            } else {
                out.extend([n_s + RW1_TERM, n_s + TAU_TERM]);
            }
        }
        out.sort_unstable();
        out.dedup();
        out
    }
}

#[derive(Debug, Clone)]
pub struct StageTwoFit {
    pub posterior: CountyPosterior,
    pub diagnostics: Vec<ParamDiagnostics>,
    pub draws: PosteriorDraws,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CountyPosterior {
    pub grid: YearGrid,
    pub county_ids: Vec<String>,
    /// Per cell, `county * n_years + year`. Marginal medians of the share,
    /// rescaled to sum to one within each state-year.
    pub rho_median: Vec<f64>,
    /// `rho_median` times the state total.
    pub mu_median: Vec<f64>,
    pub pi_median: Vec<f64>,
    pub pi_lo: Vec<f64>,
    pub pi_hi: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CountySummaryRow {
    pub county_id: String,
    pub year: i32,
    pub rho_median: f64,
    pub mu_median: f64,
    pub pi_median: f64,
    pub pi_lo95: f64,
    pub pi_hi95: f64,
}

impl CountyPosterior {
    pub fn rows(&self) -> Vec<CountySummaryRow> {
        let t_n = self.grid.n_years();
        (0..self.county_ids.len() * t_n)
            .map(|cell| CountySummaryRow {
                county_id: self.county_ids[cell / t_n].clone(),
                year: self.grid.year(cell % t_n),
                rho_median: self.rho_median[cell],
                mu_median: self.mu_median[cell],
                pi_median: self.pi_median[cell],
                pi_lo95: self.pi_lo[cell],
                pi_hi95: self.pi_hi[cell],
            })
            .collect()
    }

    /// Writes `stage2_summary.csv` into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        csvio::write_rows(&dir.join("stage2_summary.csv"), &self.rows())
    }
}

pub fn read_county_summary(path: &Path) -> Result<Vec<CountySummaryRow>> {
    csvio::read_rows(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::{County, State};
    use crate::panel::{CovariateTable, COUNTY_COVARIATES};
    use crate::stats::{poisson_ln_pmf, LN_2PI};

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn offsets() {
        assert!(close(
            population_log_offset(&[7.0], 40.0).unwrap()[0],
            40f64.ln(),
            1e-12
        ));
        let o = population_log_offset(&[100.0, 300.0], 40.0).unwrap();
        assert!(close(o[0], 10f64.ln(), 1e-12) && close(o[1], 30f64.ln(), 1e-12));
        assert!(close(o.iter().map(|v| v.exp()).sum::<f64>(), 40.0, 1e-12));
        for v in population_log_offset(&[5.0; 4], 12.0).unwrap() {
            assert!(close(v, 3f64.ln(), 1e-12));
        }
        assert!(population_log_offset(&[0.0, 1.0], 1.0).is_err());
    }

    #[test]
    fn softmax_cases() {
        for r in softmax_allocation(&[0.0; 3]).unwrap() {
            assert!(close(r, 1.0 / 3.0, 1e-15));
        }
        let r = softmax_allocation(&[1f64.ln(), 2f64.ln(), 3f64.ln()]).unwrap();
        for (a, b) in r.iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!(close(*a, b, 1e-15));
        }
        let eta = [0.3, -1.2, 2.5];
        let a = softmax_allocation(&eta).unwrap();
        let b = softmax_allocation(&eta.map(|e| e + 7.3)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!(close(*x, *y, 1e-12));
        }
        assert!(softmax_allocation(&[f64::NEG_INFINITY; 2]).is_err());
        let big = softmax_allocation(&[1000.0, 999.0]).unwrap();
        assert!(big.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn expected_counts_and_risk() {
        assert_eq!(expected_counts(&[0.25, 0.75], 40.0), vec![10.0, 30.0]);
        assert_eq!(expected_counts(&[0.25; 4], 100.0), vec![25.0; 4]);
        assert_eq!(expected_counts(&[1.0], 17.5), vec![17.5]);
        assert!(close(county_risk(30.0, 1000.0), 0.03, 1e-15));
        assert_eq!(county_risk(0.0, 1000.0), 0.0);
        let draws: Vec<f64> = [10.0, 20.0, 30.0].iter().map(|m| county_risk(*m, 1000.0)).collect();
        assert!(close(crate::stats::median(&draws).unwrap(), 0.02, 1e-15));
    }

    #[test]
    fn bym_cases() {
        let two = NeighborStructure::from_edges(2, &[(0, 1)]);
        let p = bym_log_prior(&[0.4, 0.4], &[0.0, 0.0], 3.0, 1.0, &two).unwrap();
        assert_eq!(p.icar_kernel, 0.0);
        let p = bym_log_prior(&[1.0, -1.0], &[0.0, 0.0], 2.0, 1.0, &two).unwrap();
        assert!(close(p.icar_kernel, -4.0, 1e-12));
        assert!(close(p.unstructured, 2.0 * (-0.5 * LN_2PI), 1e-12));
        assert!(close(p.icar_normalizer, 0.5 * 2f64.ln(), 1e-12));
        assert!(bym_log_prior(&[0.0; 2], &[0.0; 2], 0.0, 1.0, &two).is_err());
    }

    #[test]
    fn icar_invariant_to_component_shift() {
        let s = NeighborStructure::from_edges(5, &[(0, 1), (1, 2), (3, 4)]);
        let u = [0.1, -0.4, 0.3, 0.9, -0.2];
        let mut v = u;
        for x in &mut v[..3] {
            *x += 2.5;
        }
        let a = bym_log_prior(&u, &[0.0; 5], 1.7, 1.0, &s).unwrap();
        let b = bym_log_prior(&v, &[0.0; 5], 1.7, 1.0, &s).unwrap();
        assert!(close(a.icar_kernel, b.icar_kernel, 1e-12));
        assert_eq!(s.rank(), 3);
    }

    #[test]
    fn county_rw1_cases() {
        let tau: f64 = 2.0;
        let v = rw1_county_log_prior(&[0.7; 4], tau).unwrap();
        assert!(close(v, 3.0 * (-0.5 * (LN_2PI - tau.ln())), 1e-12));
        assert!(close(
            rw1_county_log_prior(&[0.0, 1.0], 1.0).unwrap(),
            -0.5 * LN_2PI - 0.5,
            1e-12
        ));
        assert_eq!(rw1_county_log_prior(&[0.3], 1.0).unwrap(), 0.0);
        assert!(rw1_county_log_prior(&[0.3], -1.0).is_err());
    }

    #[test]
    fn gamma_anchor_cases() {
        let sd: f64 = 0.3;
        let peak = gamma_anchor_log_prior(0.2, 0.2, sd).unwrap();
        assert!(close(peak, -0.5 * (LN_2PI + (sd * sd).ln()), 1e-12));
        assert!(close(gamma_anchor_log_prior(0.5, 0.2, sd).unwrap(), peak - 0.5, 1e-12));
        assert!(matches!(
            gamma_anchor_log_prior(0.2, 0.2, 0.0),
            Err(Error::DegenerateAnchor)
        ));
    }

    #[test]
    fn conditional_poisson_is_multinomial() {
        let (a, b) = poisson_conditional_equivalence(&[1.0, 2.0, 3.0], 2, &[0, 0, 2]).unwrap();
        assert!(close(a, 0.25, 1e-12) && close(b, 0.25, 1e-12));
        let (a, b) = poisson_conditional_equivalence(&[1.0, 2.0], 0, &[0, 0]).unwrap();
        assert!(close(a, 1.0, 1e-12) && close(b, 1.0, 1e-12));
        let (a, b) = poisson_conditional_equivalence(&[5.0, 5.0], 3, &[1, 2]).unwrap();
        assert!(close(a, 0.375, 1e-12) && close(b, 0.375, 1e-12));
        assert!(matches!(
            poisson_conditional_equivalence(&[1.0, 1.0], 3, &[1, 1]),
            Err(Error::CountSumMismatch { expected: 3, got: 2 })
        ));
    }

    /// Two states: S0 with counties a, b (adjacent), S1 with a single county c.
    pub(crate) fn toy(counts: Option<Vec<u64>>) -> (StageTwoData, GeoHierarchy) {
        let geo = GeoHierarchy::new(
            vec![
                State {
                    state_id: "S0".into(),
                    name: "zero".into(),
                },
                State {
                    state_id: "S1".into(),
                    name: "one".into(),
                },
            ],
            vec![
                County {
                    county_id: "a".into(),
                    state_id: "S0".into(),
                    name: "a".into(),
                },
                County {
                    county_id: "b".into(),
                    state_id: "S0".into(),
                    name: "b".into(),
                },
                County {
                    county_id: "c".into(),
                    state_id: "S1".into(),
                    name: "c".into(),
                },
            ],
            vec![("a".to_string(), "b".to_string())],
        )
        .unwrap();
        let grid = YearGrid::new(2016, 2017, 2016, 2016, 2017).unwrap();
        let mut cov = CovariateTable::new(&COUNTY_COVARIATES, 3, 2);
        for j in 0..5 {
            for c in 0..3 {
                for t in 0..2 {
                    cov.set(j, c, t, ((j + 2 * c + t) as f64 * 0.37).sin());
                }
            }
        }
        let panel = CountyPanel {
            grid,
            county_ids: geo.county_ids(),
            population: vec![100, 120, 300, 310, 50, 55],
            covariates: cov,
        };
        let stage1 = StageOnePosterior {
            grid,
            state_ids: geo.state_ids(),
            pi_median: vec![0.1; 4],
            pi_lo: vec![0.05; 4],
            pi_hi: vec![0.2; 4],
            y_tilde: vec![40.0, 43.0, 6.0, 5.5],
            delta_median: vec![1.0; 4],
            delta_lo: vec![1.0; 4],
            delta_hi: vec![1.0; 4],
            omega_median: vec![0.2, -0.1],
            omega_sd: vec![0.3, 0.5],
        };
        let counts = counts.map(|counts| CountyCounts { n_years: 2, counts });
        (StageTwoData::new(panel, &geo, &stage1, counts).unwrap(), geo)
    }

    #[test]
    fn equal_effects_allocate_by_population() {
        let (data, _) = toy(None);
        let p = StageTwoParams::zeros(2, 3, 2);
        let rho = data.allocation(&p).unwrap();
        assert!(close(rho[0], 100.0 / 400.0, 1e-12));
        assert!(close(rho[2], 300.0 / 400.0, 1e-12));
        assert!(close(rho[4], 1.0, 1e-15));
    }

    #[test]
    fn single_county_likelihood_is_poisson_at_total() {
        let counts = vec![0, 0, 0, 0, 7, 4];
        let (with, _) = toy(Some(counts.clone()));
        let (without, _) = toy(None);
        let mut p = StageTwoParams::zeros(2, 3, 2);
        p.beta = [0.1, -0.2, 0.3, 0.0, 0.05];
        let hyper = CountyHyper::default();
        let a = stage2_log_posterior(&p, &with, &hyper).unwrap();
        let b = stage2_log_posterior(&p, &without, &hyper).unwrap();
        // counties a and b get zero counts; their terms are -mu
        let rho = with.allocation(&p).unwrap();
        let expected = -(rho[0] * 40.0 + rho[1] * 43.0 + rho[2] * 40.0 + rho[3] * 43.0)
            + poisson_ln_pmf(7, 6.0)
            + poisson_ln_pmf(4, 5.5);
        assert!(close(a - b, expected, 1e-9));
    }

    #[test]
    fn state_shift_leaves_likelihood_unchanged() {
        let (data, _) = toy(Some(vec![9, 12, 30, 31, 6, 5]));
        let hyper = CountyHyper::default();
        let mut p = StageTwoParams::zeros(2, 3, 2);
        p.u_unstr = vec![0.2, -0.1, 0.3];
        let base = stage2_log_posterior(&p, &data, &hyper).unwrap();
        let prior_base = stage2_log_posterior(&p, &toy(None).0, &hyper).unwrap();
        p.gamma[0] += 0.5;
        let moved = stage2_log_posterior(&p, &data, &hyper).unwrap();
        let prior_moved = stage2_log_posterior(&p, &toy(None).0, &hyper).unwrap();
        assert!(close(base - prior_base, moved - prior_moved, 1e-9));
    }

    #[test]
    fn flat_density_matches_structured_posterior() {
        let (data, _) = toy(Some(vec![9, 12, 30, 31, 6, 5]));
        let model = CountyModel::new(data.clone(), CountyHyper::default()).unwrap();
        for x in model.initial_values(11, 4) {
            let p = model.layout.unpack(&x);
            assert_eq!(model.layout.pack(&p), x);
            let direct = stage2_log_posterior(&p, &data, &model.hyper).unwrap();
            let flat = sampler::LogDensity::log_density(&model, &x);
            assert!(close(direct, flat, 1e-9), "{direct} vs {flat}");
        }
        assert_eq!(model.param_space().dim(), model.layout.dim);
    }

    #[test]
    fn pinned_anchor_excluded_from_blocks() {
        let (mut data, _) = toy(None);
        data.omega_sd[1] = 0.0;
        let model = CountyModel::new(data, CountyHyper::default()).unwrap();
        assert!(!model.blocks().iter().any(|b| b.name == "gamma#1"));
        for x in model.initial_values(1, 2) {
            assert_eq!(x[model.layout.gamma + 1], -0.1);
            assert!(sampler::LogDensity::log_density(&model, &x).is_finite());
        }
    }

    #[test]
    fn blocks_change_only_their_terms() {
        use crate::sampler::{BlockKind, LogDensity};
        use rand::Rng;
        let (data, _) = toy(Some(vec![9, 12, 30, 31, 6, 5]));
        let model = CountyModel::new(data, CountyHyper::default()).unwrap();
        let mut rng = crate::sampler::stream_rng(5, 0);
        let mut x = model.initial_values(3, 1).remove(0);
        for v in &mut x[model.layout.u_str..model.layout.tau_u] {
            *v += rng.random_range(-0.5..0.5);
        }
        let before: Vec<f64> = (0..model.n_terms()).map(|k| model.term(k, &x)).collect();
        for block in model.blocks() {
            let mut y = x.clone();
            let e = 0.3;
            match &block.kind {
                BlockKind::Direction(terms) => {
                    for t in terms {
                        if t.multiplicative {
                            y[t.coord] *= (e * t.weight).exp();
                        } else {
                            y[t.coord] += e * t.weight;
                        }
                    }
                }
                BlockKind::Joint(c) | BlockKind::SumPreserving(c) => {
                    for &i in c {
                        y[i] *= 1.1;
                        y[i] += 0.05;
                    }
                }
            }
            let touched = block
                .terms
                .clone()
                .unwrap_or_else(|| model.terms_touching(&block.coords()));
            for (k, &b) in before.iter().enumerate() {
                if !touched.contains(&k) {
                    let a = model.term(k, &y);
                    assert!(close(a, b, 1e-9), "block {} changed term {k}: {b} -> {a}", block.name);
                }
            }
        }
    }
}
