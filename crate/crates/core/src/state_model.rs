//! State-level Poisson model with definition-change adjustment.
//!
//! Observed counts are Poisson with mean `n * pi / delta`, where the log
//! risk is `alpha + beta . x + phi[s, t] + omega[s]`. Each state's `phi`
//! series is a first-order random walk anchored at the reference year, and
//! every post-anchor adjustment factor `delta` carries a `Uniform(r, 1)`
//! prior. Factors whose lower bound is one are pinned at one.

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::adjustment::AdjustmentSchedule;
use crate::csvio;
use crate::error::{Error, Result};
use crate::panel::{id_map, StatePanel, YearGrid};
use crate::sampler::diagnostics::{diagnose_series, ParamDiagnostics};
use crate::sampler::{self, Block, McmcConfig, ParamSpace, PosteriorDraws, Transform};
use crate::stats::{gamma_ln_pdf, ln_factorial, normal_ln_pdf, normal_ln_pdf_prec, poisson_ln_pmf_with, quantiles};

/// Prior settings. Normal priors are given by their variance; the precision
/// prior is Gamma in the shape-rate parameterization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StateHyper {
    pub fixed_effect_variance: f64,
    pub omega_variance: f64,
    pub tau_shape: f64,
    pub tau_rate: f64,
}

impl Default for StateHyper {
    fn default() -> Self {
        Self {
            fixed_effect_variance: 10.0,
            omega_variance: 10.0,
            tau_shape: 1.0,
            tau_rate: 100.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageOneParams {
    pub alpha: f64,
    pub beta: [f64; 2],
    pub omega: Vec<f64>,
    /// `state * n_years + year`.
    pub phi: Vec<f64>,
    pub tau_phi: f64,
    /// `state * n_years + year`; one for years up to the anchor and for
    /// pinned factors.
    pub delta: Vec<f64>,
}

impl StageOneParams {
    pub fn zeros(n_states: usize, n_years: usize) -> Self {
        Self {
            alpha: 0.0,
            beta: [0.0; 2],
            omega: vec![0.0; n_states],
            phi: vec![0.0; n_states * n_years],
            tau_phi: 1.0,
            delta: vec![1.0; n_states * n_years],
        }
    }
}

pub fn state_linear_predictor(params: &StageOneParams, panel: &StatePanel, s: usize, t: usize) -> f64 {
    let cov = &panel.covariates;
    let cell = panel.cell(s, t);
    params.alpha
        + params.beta[0] * cov.get(0, s, t)
        + params.beta[1] * cov.get(1, s, t)
        + params.phi[cell]
        + params.omega[s]
}

/// Poisson log-likelihood over observed cells. Adjustment factors only
/// enter after the anchor year.
pub fn state_log_likelihood(params: &StageOneParams, panel: &StatePanel, schedule: &AdjustmentSchedule) -> Result<f64> {
    let _ = schedule;
    let anchor = panel.grid.anchor_index();
    let mut total = 0.0;
    for s in 0..panel.n_states() {
        for t in 0..panel.grid.n_years() {
            let Some(y) = panel.count(s, t) else {
                continue;
            };
            let delta = if t > anchor {
                params.delta[panel.cell(s, t)]
            } else {
                1.0
            };
            let pi = state_linear_predictor(params, panel, s, t).exp();
            let mean = panel.population(s, t) as f64 * pi / delta;
            if !mean.is_finite() {
                return Err(Error::NonFinite(format!(
                    "Poisson mean for ({}, {})",
                    panel.state_ids[s],
                    panel.grid.year(t)
                )));
            }
            total += poisson_ln_pmf_with(y, mean, ln_factorial(y));
        }
    }
    Ok(total)
}

/// Random-walk prior anchored at `ref_index`: the anchor is `N(0, 1/tau)`,
/// later years step forward from their predecessor and earlier years step
/// backward from their successor.
pub fn rw1_log_prior(phi: &[f64], tau: f64, ref_index: usize) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::Domain(format!(
            "random-walk precision must be positive, got {tau}"
        )));
    }
    if ref_index >= phi.len() {
        return Err(Error::Domain("reference index outside the series".into()));
    }
    Ok(rw1_anchored(phi, tau, ref_index))
}

#[inline]
fn rw1_anchored(phi: &[f64], tau: f64, ref_index: usize) -> f64 {
    let mut lp = normal_ln_pdf_prec(phi[ref_index], 0.0, tau);
    for t in 1..phi.len() {
        // forward and backward steps share the same increment density
        lp += normal_ln_pdf_prec(phi[t], phi[t - 1], tau);
    }
    lp
}

/// `Uniform(r, 1)` log density.
pub fn delta_log_prior(delta: f64, r: f64) -> Result<f64> {
    if r >= 1.0 {
        return Err(Error::DegenerateInterval(r));
    }
    if !(r > 0.0) {
        return Err(Error::Domain(format!(
            "adjustment lower bound must be positive, got {r}"
        )));
    }
    Ok(if (r..=1.0).contains(&delta) {
        -(1.0 - r).ln()
    } else {
        f64::NEG_INFINITY
    })
}

/// Whether the factor at `(s, t)` is a free parameter.
fn delta_is_free(schedule: &AdjustmentSchedule, s: usize, t: usize) -> bool {
    t > schedule.grid.anchor_index() && schedule.r(s, t) < 1.0
}

pub fn stage1_log_posterior(
    params: &StageOneParams,
    panel: &StatePanel,
    schedule: &AdjustmentSchedule,
    hyper: &StateHyper,
) -> Result<f64> {
    let t_n = panel.grid.n_years();
    let mut lp = 0.0;
    for s in 0..panel.n_states() {
        for t in 0..t_n {
            if delta_is_free(schedule, s, t) {
                lp += delta_log_prior(params.delta[panel.cell(s, t)], schedule.r(s, t))?;
            } else if t > schedule.grid.anchor_index() && params.delta[panel.cell(s, t)] != 1.0 {
                return Ok(f64::NEG_INFINITY);
            }
        }
    }
    if lp == f64::NEG_INFINITY {
        return Ok(lp);
    }
    lp += state_log_likelihood(params, panel, schedule)?;
    let ref_index = panel.grid.ref_index();
    for s in 0..panel.n_states() {
        lp += rw1_log_prior(&params.phi[s * t_n..(s + 1) * t_n], params.tau_phi, ref_index)?;
        lp += normal_ln_pdf(params.omega[s], 0.0, hyper.omega_variance);
    }
    lp += normal_ln_pdf(params.alpha, 0.0, hyper.fixed_effect_variance);
    for b in params.beta {
        lp += normal_ln_pdf(b, 0.0, hyper.fixed_effect_variance);
    }
    lp += gamma_ln_pdf(params.tau_phi, hyper.tau_shape, hyper.tau_rate);
    Ok(lp)
}

/// Position of each parameter group in the flat sampler vector.
#[derive(Debug, Clone, PartialEq)]
pub struct StateLayout {
    pub n_states: usize,
    pub n_years: usize,
    pub omega: usize,
    pub phi: usize,
    pub tau: usize,
    /// Flat index of each free adjustment factor, by cell.
    pub delta: Vec<Option<usize>>,
    pub dim: usize,
}

impl StateLayout {
    pub const ALPHA: usize = 0;
    pub const BETA: usize = 1;

    fn new(schedule: &AdjustmentSchedule, n_states: usize, n_years: usize) -> Self {
        let omega = 3;
        let phi = omega + n_states;
        let tau = phi + n_states * n_years;
        let mut next = tau + 1;
        let mut delta = vec![None; n_states * n_years];
        for s in 0..n_states {
            for t in 0..n_years {
                if delta_is_free(schedule, s, t) {
                    delta[s * n_years + t] = Some(next);
                    next += 1;
                }
            }
        }
        Self {
            n_states,
            n_years,
            omega,
            phi,
            tau,
            delta,
            dim: next,
        }
    }

    pub fn unpack(&self, x: &[f64]) -> StageOneParams {
        let cells = self.n_states * self.n_years;
        StageOneParams {
            alpha: x[Self::ALPHA],
            beta: [x[Self::BETA], x[Self::BETA + 1]],
            omega: x[self.omega..self.omega + self.n_states].to_vec(),
            phi: x[self.phi..self.phi + cells].to_vec(),
            tau_phi: x[self.tau],
            delta: self.delta.iter().map(|d| d.map_or(1.0, |i| x[i])).collect(),
        }
    }

    pub fn pack(&self, p: &StageOneParams) -> Vec<f64> {
        let mut x = vec![0.0; self.dim];
        x[Self::ALPHA] = p.alpha;
        x[Self::BETA..Self::BETA + 2].copy_from_slice(&p.beta);
        x[self.omega..self.omega + self.n_states].copy_from_slice(&p.omega);
        x[self.phi..self.phi + p.phi.len()].copy_from_slice(&p.phi);
        x[self.tau] = p.tau_phi;
        for (cell, d) in self.delta.iter().enumerate() {
            if let Some(i) = d {
                x[*i] = p.delta[cell];
            }
        }
        x
    }
}

/// Stage I posterior as a sampler target.
#[derive(Debug, Clone)]
pub struct StateModel {
    pub panel: StatePanel,
    pub schedule: AdjustmentSchedule,
    pub hyper: StateHyper,
    pub layout: StateLayout,
    ln_fact: Vec<f64>,
    ln_one_minus_r: Vec<f64>,
}

impl StateModel {
    pub fn new(panel: StatePanel, schedule: AdjustmentSchedule, hyper: StateHyper) -> Result<Self> {
        if !panel.covariates.all_finite() {
            return Err(Error::Validation(vec![
                "state covariates must be complete before fitting".into(),
            ]));
        }
        if schedule.state_ids != panel.state_ids || schedule.grid != panel.grid {
            return Err(Error::Validation(vec![
                "adjustment schedule does not match the state panel".into(),
            ]));
        }
        let layout = StateLayout::new(&schedule, panel.n_states(), panel.grid.n_years());
        let ln_fact = panel.counts.iter().map(|c| c.map_or(0.0, ln_factorial)).collect();
        let ln_one_minus_r = schedule.ratio.iter().map(|r| (1.0 - r).ln()).collect();
        Ok(Self {
            panel,
            schedule,
            hyper,
            layout,
            ln_fact,
            ln_one_minus_r,
        })
    }

    pub fn param_space(&self) -> ParamSpace {
        let l = &self.layout;
        let mut space = ParamSpace::default();
        space.push("alpha", Transform::Identity);
        space.push("beta[1]", Transform::Identity);
        space.push("beta[2]", Transform::Identity);
        for id in &self.panel.state_ids {
            space.push(format!("omega[{id}]"), Transform::Identity);
        }
        for id in &self.panel.state_ids {
            for year in self.panel.grid.years() {
                space.push(format!("phi[{id},{year}]"), Transform::Identity);
            }
        }
        space.push("tau_phi", Transform::Log);
        for (cell, d) in l.delta.iter().enumerate() {
            if d.is_some() {
                let (s, t) = (cell / l.n_years, cell % l.n_years);
                space.push(
                    format!("delta[{},{}]", self.panel.state_ids[s], self.panel.grid.year(t)),
                    Transform::Interval {
                        lo: self.schedule.r(s, t),
                        hi: 1.0,
                    },
                );
            }
        }
        debug_assert_eq!(space.dim(), l.dim);
        space
    }

    /// Blocks: fixed effects jointly, each state intercept, each state's
    /// temporal series jointly and cell by cell, the precision, each free adjustment factor, plus
    /// direction moves along the level ridges (intercepts against temporal
    /// effects, coefficients against temporal effects, adjustment factors
    /// against their year's temporal effect).
    pub fn blocks(&self) -> Vec<Block> {
        let l = &self.layout;
        let t_n = l.n_years;
        let ids = &self.panel.state_ids;
        let all_phi: Vec<usize> = (l.phi..l.phi + l.n_states * t_n).collect();
        let mut blocks = vec![Block::joint("fixed", vec![0, 1, 2]).with_adaptive_shape()];
        for (s, id) in ids.iter().enumerate() {
            blocks.push(Block::scalar(format!("omega[{id}]"), l.omega + s));
        }
        for (s, id) in ids.iter().enumerate() {
            let coords = (l.phi + s * t_n..l.phi + (s + 1) * t_n).collect();
            blocks.push(Block::joint(format!("phi[{id}]"), coords));
            // cells without data have a much wider conditional than observed ones
            for t in 0..t_n {
                let year = self.panel.grid.year(t);
                blocks.push(Block::scalar(format!("phi[{id},{year}]"), l.phi + s * t_n + t));
            }
        }
        blocks.push(Block::scalar("tau_phi", l.tau).with_step(0.5));
        for (cell, d) in l.delta.iter().enumerate() {
            if let Some(i) = *d {
                blocks.push(Block::scalar(format!("delta#{cell}"), i).with_step(0.5));
                blocks.push(
                    Block::direction_mixed(format!("delta-ridge#{cell}"), vec![(l.phi + cell, 1.0)], vec![(i, 1.0)])
                        .with_step(0.1),
                );
            }
        }

        let mut ridge = vec![(StateLayout::ALPHA, 1.0)];
        ridge.extend(all_phi.iter().map(|&i| (i, -1.0)));
        blocks.push(Block::direction("ridge-alpha", ridge).with_step(1.0));
        for (s, id) in ids.iter().enumerate() {
            let mut ridge = vec![(l.omega + s, 1.0)];
            ridge.extend((0..t_n).map(|t| (l.phi + s * t_n + t, -1.0)));
            blocks.push(Block::direction(format!("ridge-omega[{id}]"), ridge).with_step(1.0));
        }
        let mut ridge = vec![(StateLayout::ALPHA, 1.0)];
        ridge.extend((0..l.n_states).map(|s| (l.omega + s, -1.0)));
        blocks.push(Block::direction("ridge-alpha-omega", ridge).with_step(1.0));
        let cov = &self.panel.covariates;
        for j in 0..2 {
            let mut ridge = vec![(StateLayout::BETA + j, 1.0)];
            for s in 0..l.n_states {
                for t in 0..t_n {
                    ridge.push((l.phi + s * t_n + t, -cov.get(j, s, t)));
                }
            }
            blocks.push(Block::direction(format!("ridge-beta[{}]", j + 1), ridge).with_step(0.5));
        }
        blocks
    }

    /// Per-chain starting points: fixed effects from `N(0, 0.1)`, random
    /// effects at zero, the precision at its prior mean and adjustment
    /// factors at their interval midpoints, all jittered per chain.
    pub fn initial_values(&self, seed: u64, chains: usize) -> Vec<Vec<f64>> {
        let l = &self.layout;
        (0..chains)
            .map(|chain| {
                let mut rng = sampler::stream_rng(seed ^ 0x5eed_0001, chain as u64);
                let mut normal = |sd: f64| sd * rng.sample::<f64, _>(StandardNormal);
                let mut p = StageOneParams::zeros(l.n_states, l.n_years);
                p.alpha = normal(0.1f64.sqrt());
                p.beta = [normal(0.1f64.sqrt()), normal(0.1f64.sqrt())];
                for w in &mut p.omega {
                    *w = normal(0.01);
                }
                for f in &mut p.phi {
                    *f = normal(0.01);
                }
                p.tau_phi = self.hyper.tau_shape / self.hyper.tau_rate * normal(0.1).exp();
                for (cell, d) in l.delta.iter().enumerate() {
                    if d.is_some() {
                        let r = self.schedule.ratio[cell];
                        let u = 0.5 + 0.1 * normal(1.0).tanh();
                        p.delta[cell] = r + (1.0 - r) * u;
                    }
                }
                l.pack(&p)
            })
            .collect()
    }

    #[inline]
    fn lambda_at(&self, x: &[f64], s: usize, t: usize) -> f64 {
        let l = &self.layout;
        let cov = &self.panel.covariates;
        x[0] + x[1] * cov.get(0, s, t) + x[2] * cov.get(1, s, t) + x[l.phi + s * l.n_years + t] + x[l.omega + s]
    }

    /// Fits the model and post-processes the draws.
    pub fn fit(&self, config: &McmcConfig) -> Result<StageOneFit> {
        let space = self.param_space();
        let init = self.initial_values(config.seed, config.chains);
        let draws = sampler::run_chains(self, &space, &init, &self.blocks(), config)?;
        let posterior = self.postprocess(&draws)?;
        let diagnostics = self.diagnostics(&draws)?;
        Ok(StageOneFit {
            posterior,
            diagnostics,
            draws,
        })
    }

    /// Log risk per cell for every draw: `[chain][draw][cell]`.
    pub fn lambda_draws(&self, draws: &PosteriorDraws) -> Vec<Vec<Vec<f64>>> {
        let (s_n, t_n) = (self.layout.n_states, self.layout.n_years);
        draws.map_draws(|x| {
            (0..s_n * t_n)
                .map(|cell| self.lambda_at(x, cell / t_n, cell % t_n))
                .collect()
        })
    }

    pub fn postprocess(&self, draws: &PosteriorDraws) -> Result<StageOnePosterior> {
        let lambda = self.lambda_draws(draws);
        let cells = self.layout.n_states * self.layout.n_years;
        let per_cell = |cell: usize| -> Vec<f64> {
            lambda
                .iter()
                .flat_map(|chain| chain.iter().map(move |d| d[cell]))
                .collect()
        };
        let lambda_cells: Vec<Vec<f64>> = (0..cells).map(per_cell).collect();
        let omega: Vec<Vec<f64>> = (0..self.layout.n_states)
            .map(|s| draws.pooled(self.layout.omega + s))
            .collect();
        let delta: Vec<Vec<f64>> = self
            .layout
            .delta
            .iter()
            .map(|d| match d {
                Some(i) => draws.pooled(*i),
                None => vec![1.0],
            })
            .collect();
        postprocess_stage1(&lambda_cells, &omega, &delta, &self.panel)
    }

    /// Monitored quantities: fixed effects, state intercepts, precision,
    /// free adjustment factors and the per-cell log risk.
    pub fn diagnostics(&self, draws: &PosteriorDraws) -> Result<Vec<ParamDiagnostics>> {
        let l = &self.layout;
        let mut series = Vec::new();
        let mut monitored: Vec<usize> = vec![0, 1, 2];
        monitored.extend(l.omega..l.omega + l.n_states);
        monitored.push(l.tau);
        monitored.extend(l.delta.iter().flatten().copied());
        for p in monitored {
            series.push((draws.names[p].clone(), draws.param(p), draws.accept_rate(p)));
        }
        let lambda = self.lambda_draws(draws);
        for s in 0..l.n_states {
            for t in 0..l.n_years {
                let cell = s * l.n_years + t;
                let chains = lambda
                    .iter()
                    .map(|chain| chain.iter().map(|d| d[cell]).collect())
                    .collect();
                let name = format!("lambda[{},{}]", self.panel.state_ids[s], self.panel.grid.year(t));
                series.push((name, chains, draws.accept_rate(l.phi + cell)));
            }
        }
        diagnose_series(&series)
    }
}

impl sampler::LogDensity for StateModel {
    fn log_density(&self, x: &[f64]) -> f64 {
        let l = &self.layout;
        let t_n = l.n_years;
        let anchor = self.panel.grid.anchor_index();
        let tau = x[l.tau];
        if !(tau > 0.0) {
            return f64::NEG_INFINITY;
        }
        let mut lp = 0.0;
        for s in 0..l.n_states {
            for t in 0..t_n {
                let cell = s * t_n + t;
                let mut delta = 1.0;
                if let Some(i) = l.delta[cell] {
                    delta = x[i];
                    let r = self.schedule.ratio[cell];
                    if !(delta >= r && delta <= 1.0) {
                        return f64::NEG_INFINITY;
                    }
                    lp -= self.ln_one_minus_r[cell];
                }
                if let Some(y) = self.panel.counts[cell] {
                    let lambda = self.lambda_at(x, s, t);
                    let n = self.panel.population[cell] as f64;
                    let ln_mean = n.ln() + lambda - if t > anchor { delta.ln() } else { 0.0 };
                    lp += y as f64 * ln_mean - ln_mean.exp() - self.ln_fact[cell];
                }
            }
            let phi = &x[l.phi + s * t_n..l.phi + (s + 1) * t_n];
            lp += rw1_anchored(phi, tau, self.panel.grid.ref_index());
            lp += normal_ln_pdf(x[l.omega + s], 0.0, self.hyper.omega_variance);
        }
        for &v in &x[0..3] {
            lp += normal_ln_pdf(v, 0.0, self.hyper.fixed_effect_variance);
        }
        lp + gamma_ln_pdf(tau, self.hyper.tau_shape, self.hyper.tau_rate)
    }
}

#[derive(Debug, Clone)]
pub struct StageOneFit {
    pub posterior: StageOnePosterior,
    pub diagnostics: Vec<ParamDiagnostics>,
    pub draws: PosteriorDraws,
}

/// Point and interval summaries handed to the county stage and reported.
#[derive(Debug, Clone, PartialEq)]
pub struct StageOnePosterior {
    pub grid: YearGrid,
    pub state_ids: Vec<String>,
    /// Per cell, `state * n_years + year`.
    pub pi_median: Vec<f64>,
    pub pi_lo: Vec<f64>,
    pub pi_hi: Vec<f64>,
    pub y_tilde: Vec<f64>,
    pub delta_median: Vec<f64>,
    pub delta_lo: Vec<f64>,
    pub delta_hi: Vec<f64>,
    /// Per state.
    pub omega_median: Vec<f64>,
    pub omega_sd: Vec<f64>,
}

impl StageOnePosterior {
    pub fn cell(&self, s: usize, t: usize) -> usize {
        s * self.grid.n_years() + t
    }
}

/// Summarizes per-cell log-risk draws, per-state intercept draws and
/// per-cell adjustment draws into medians and central 95% intervals.
pub fn postprocess_stage1(
    lambda: &[Vec<f64>],
    omega: &[Vec<f64>],
    delta: &[Vec<f64>],
    panel: &StatePanel,
) -> Result<StageOnePosterior> {
    let cells = panel.n_states() * panel.grid.n_years();
    if lambda.len() != cells || omega.len() != panel.n_states() || delta.len() != cells {
        return Err(Error::Validation(vec!["draw arrays do not match the panel".into()]));
    }
    if lambda.iter().chain(omega).chain(delta).any(|d| d.is_empty()) {
        return Err(Error::Empty("no posterior draws to summarize".into()));
    }
    let probs = [0.025, 0.5, 0.975];
    let mut out = StageOnePosterior {
        grid: panel.grid,
        state_ids: panel.state_ids.clone(),
        pi_median: Vec::with_capacity(cells),
        pi_lo: Vec::with_capacity(cells),
        pi_hi: Vec::with_capacity(cells),
        y_tilde: Vec::with_capacity(cells),
        delta_median: Vec::with_capacity(cells),
        delta_lo: Vec::with_capacity(cells),
        delta_hi: Vec::with_capacity(cells),
        omega_median: Vec::new(),
        omega_sd: Vec::new(),
    };
    for cell in 0..cells {
        let pi: Vec<f64> = lambda[cell].iter().map(|l| l.exp()).collect();
        let q = quantiles(&pi, &probs)?;
        out.pi_lo.push(q[0]);
        out.pi_median.push(q[1]);
        out.pi_hi.push(q[2]);
        out.y_tilde.push(q[1] * panel.population[cell] as f64);
        let q = quantiles(&delta[cell], &probs)?;
        out.delta_lo.push(q[0]);
        out.delta_median.push(q[1]);
        out.delta_hi.push(q[2]);
    }
    for draws in omega {
        out.omega_median.push(quantiles(draws, &[0.5])?[0]);
        out.omega_sd.push(crate::stats::sample_sd(draws));
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct SummaryRow {
    state_id: String,
    year: i32,
    pi_median: f64,
    pi_lo95: f64,
    pi_hi95: f64,
    y_tilde: f64,
    delta_median: f64,
    delta_lo95: f64,
    delta_hi95: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct EffectRow {
    state_id: String,
    omega_median: f64,
    omega_sd: f64,
}

impl StageOnePosterior {
    /// Writes `stage1_summary.csv` and `stage1_state_effects.csv` into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        let t_n = self.grid.n_years();
        let rows: Vec<SummaryRow> = (0..self.state_ids.len() * t_n)
            .map(|cell| SummaryRow {
                state_id: self.state_ids[cell / t_n].clone(),
                year: self.grid.year(cell % t_n),
                pi_median: self.pi_median[cell],
                pi_lo95: self.pi_lo[cell],
                pi_hi95: self.pi_hi[cell],
                y_tilde: self.y_tilde[cell],
                delta_median: self.delta_median[cell],
                delta_lo95: self.delta_lo[cell],
                delta_hi95: self.delta_hi[cell],
            })
            .collect();
        csvio::write_rows(&dir.join("stage1_summary.csv"), &rows)?;
        let effects: Vec<EffectRow> = self
            .state_ids
            .iter()
            .enumerate()
            .map(|(s, id)| EffectRow {
                state_id: id.clone(),
                omega_median: self.omega_median[s],
                omega_sd: self.omega_sd[s],
            })
            .collect();
        csvio::write_rows(&dir.join("stage1_state_effects.csv"), &effects)
    }

    /// Reads the two files written by [`write_dir`](Self::write_dir); every
    /// state-year of the grid must be present and values must be finite.
    pub fn read_dir(dir: &Path, state_ids: &[String], grid: YearGrid) -> Result<Self> {
        let summary_path = dir.join("stage1_summary.csv");
        let rows: Vec<SummaryRow> = csvio::read_rows(&summary_path)?;
        let effects: Vec<EffectRow> = csvio::read_rows(&dir.join("stage1_state_effects.csv"))?;
        let index = id_map(state_ids);
        let t_n = grid.n_years();
        let cells = state_ids.len() * t_n;
        let mut out = StageOnePosterior {
            grid,
            state_ids: state_ids.to_vec(),
            pi_median: vec![f64::NAN; cells],
            pi_lo: vec![f64::NAN; cells],
            pi_hi: vec![f64::NAN; cells],
            y_tilde: vec![f64::NAN; cells],
            delta_median: vec![f64::NAN; cells],
            delta_lo: vec![f64::NAN; cells],
            delta_hi: vec![f64::NAN; cells],
            omega_median: vec![f64::NAN; state_ids.len()],
            omega_sd: vec![f64::NAN; state_ids.len()],
        };
        let mut problems = Vec::new();
        for r in rows {
            let (Some(&s), Some(t)) = (index.get(r.state_id.as_str()), grid.index(r.year)) else {
                problems.push(format!("unexpected row ({}, {})", r.state_id, r.year));
                continue;
            };
            let cell = s * t_n + t;
            out.pi_median[cell] = r.pi_median;
            out.pi_lo[cell] = r.pi_lo95;
            out.pi_hi[cell] = r.pi_hi95;
            out.y_tilde[cell] = r.y_tilde;
            out.delta_median[cell] = r.delta_median;
            out.delta_lo[cell] = r.delta_lo95;
            out.delta_hi[cell] = r.delta_hi95;
        }
        for e in effects {
            match index.get(e.state_id.as_str()) {
                Some(&s) => {
                    out.omega_median[s] = e.omega_median;
                    out.omega_sd[s] = e.omega_sd;
                }
                None => problems.push(format!("unexpected state `{}`", e.state_id)),
            }
        }
        for cell in 0..cells {
            if !(out.y_tilde[cell].is_finite() && out.y_tilde[cell] > 0.0) {
                problems.push(format!(
                    "missing or invalid y_tilde for ({}, {})",
                    state_ids[cell / t_n],
                    grid.year(cell % t_n)
                ));
            }
        }
        for (s, id) in state_ids.iter().enumerate() {
            if !(out.omega_median[s].is_finite() && out.omega_sd[s].is_finite() && out.omega_sd[s] >= 0.0) {
                problems.push(format!("missing or invalid state effect for `{id}`"));
            }
        }
        if problems.is_empty() {
            Ok(out)
        } else {
            Err(Error::Validation(problems))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::{CovariateTable, STATE_COVARIATES};
    use crate::stats::LN_2PI;

    fn panel(counts: Vec<Option<u64>>, n_states: usize, grid: YearGrid) -> StatePanel {
        let t_n = grid.n_years();
        let mut cov = CovariateTable::new(&STATE_COVARIATES, n_states, t_n);
        for j in 0..2 {
            for s in 0..n_states {
                for t in 0..t_n {
                    cov.set(j, s, t, 0.0);
                }
            }
        }
        StatePanel {
            grid,
            state_ids: (0..n_states).map(|s| format!("S{s}")).collect(),
            counts,
            population: vec![100; n_states * t_n],
            covariates: cov,
        }
    }

    fn one_cell_grid() -> YearGrid {
        YearGrid::new(2016, 2017, 2016, 2016, 2017).unwrap()
    }

    #[test]
    fn linear_predictor_cases() {
        let grid = one_cell_grid();
        let mut p = panel(vec![None, None], 1, grid);
        let mut params = StageOneParams::zeros(1, 2);
        params.alpha = -4.0;
        let l = state_linear_predictor(&params, &p, 0, 0);
        assert_eq!(l, -4.0);
        assert!((l.exp() - 0.0183).abs() < 1e-4);

        params.alpha = 0.0;
        params.beta = [1.0, 0.0];
        p.covariates.set(0, 0, 0, 2.0);
        assert_eq!(state_linear_predictor(&params, &p, 0, 0), 2.0);

        params.alpha = -4.719;
        params.beta = [-1.2551, 0.7928];
        p.covariates.set(0, 0, 0, 0.0);
        assert_eq!(state_linear_predictor(&params, &p, 0, 0), -4.719);
    }

    fn likelihood_at(y: u64, delta: f64) -> f64 {
        // second year is post-anchor so the factor applies there
        let grid = one_cell_grid();
        let p = panel(vec![None, Some(y)], 1, grid);
        let mut schedule = AdjustmentSchedule::none(grid, p.state_ids.clone());
        schedule.ratio[1] = 0.4;
        let mut params = StageOneParams::zeros(1, 2);
        params.alpha = 0.03f64.ln();
        params.delta[1] = delta;
        state_log_likelihood(&params, &p, &schedule).unwrap()
    }

    #[test]
    fn poisson_likelihood_oracles() {
        let direct = 2.0 * 3f64.ln() - 3.0 - 2f64.ln();
        assert!((likelihood_at(2, 1.0) - direct).abs() < 1e-12);
        assert!((direct - (-1.4959)).abs() < 1e-4);
        assert!((likelihood_at(0, 1.0) + 3.0).abs() < 1e-12);
        let direct = 2.0 * 6f64.ln() - 6.0 - 2f64.ln();
        assert!((likelihood_at(2, 0.5) - direct).abs() < 1e-12);
        assert!((direct - (-3.1100)).abs() < 1e-3);
    }

    #[test]
    fn likelihood_ignores_delta_up_to_anchor() {
        let grid = one_cell_grid();
        let p = panel(vec![Some(3), None], 1, grid);
        let schedule = AdjustmentSchedule::none(grid, p.state_ids.clone());
        let mut params = StageOneParams::zeros(1, 2);
        let a = state_log_likelihood(&params, &p, &schedule).unwrap();
        params.delta[0] = 0.3;
        let b = state_log_likelihood(&params, &p, &schedule).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn non_finite_mean_names_cell() {
        let grid = one_cell_grid();
        let p = panel(vec![Some(3), None], 1, grid);
        let schedule = AdjustmentSchedule::none(grid, p.state_ids.clone());
        let mut params = StageOneParams::zeros(1, 2);
        params.alpha = 1e6;
        let err = state_log_likelihood(&params, &p, &schedule).unwrap_err();
        assert!(err.to_string().contains("S0"), "{err}");
    }

    #[test]
    fn rw1_oracles() {
        let v = rw1_log_prior(&[0.0, 0.0, 0.0], 1.0, 1).unwrap();
        assert!((v - (-1.5 * LN_2PI)).abs() < 1e-12);
        assert!((v + 2.7568).abs() < 1e-4);
        let v = rw1_log_prior(&[0.0, 1.0, 0.0], 1.0, 1).unwrap();
        assert!((v - (-1.5 * LN_2PI - 1.5)).abs() < 1e-12);
        let v = rw1_log_prior(&[0.0], 4.0, 0).unwrap();
        assert!((v + 0.5 * (LN_2PI - 4f64.ln())).abs() < 1e-12);
        assert!(rw1_log_prior(&[0.0], 0.0, 0).is_err());
    }

    #[test]
    fn rw1_reference_direction_matters_only_through_anchor() {
        let phi = [0.3, -0.2, 0.5, 1.1];
        for r in 0..4 {
            let direct = normal_ln_pdf_prec(phi[r], 0.0, 2.0)
                + (0..4)
                    .filter(|&t| t > r)
                    .map(|t| normal_ln_pdf_prec(phi[t], phi[t - 1], 2.0))
                    .sum::<f64>()
                + (0..4)
                    .filter(|&t| t < r)
                    .map(|t| normal_ln_pdf_prec(phi[t], phi[t + 1], 2.0))
                    .sum::<f64>();
            assert!((rw1_log_prior(&phi, 2.0, r).unwrap() - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn delta_prior_cases() {
        let v = delta_log_prior(0.7, 0.4).unwrap();
        assert!((v - (1.0f64 / 0.6).ln()).abs() < 1e-12);
        assert_eq!(delta_log_prior(0.3, 0.4).unwrap(), f64::NEG_INFINITY);
        assert!((delta_log_prior(1.0, 0.4).unwrap() - v).abs() < 1e-12);
        assert!(matches!(delta_log_prior(1.0, 1.0), Err(Error::DegenerateInterval(_))));
    }

    #[test]
    fn posterior_at_zero_without_data() {
        let grid = YearGrid::new(2015, 2017, 2016, 2016, 2017).unwrap();
        let p = panel(vec![None; 3], 1, grid);
        let schedule = AdjustmentSchedule::none(grid, p.state_ids.clone());
        let hyper = StateHyper::default();
        let params = StageOneParams::zeros(1, 3);
        let v = stage1_log_posterior(&params, &p, &schedule, &hyper).unwrap();
        let n10 = -0.5 * (LN_2PI + 10f64.ln());
        let rw = 3.0 * (-0.5 * LN_2PI);
        let gamma = 100f64.ln() - 100.0;
        assert!((v - (4.0 * n10 + rw + gamma)).abs() < 1e-12);
    }

    #[test]
    fn posterior_support_and_additivity() {
        let grid = one_cell_grid();
        let mut p = panel(vec![None, None], 1, grid);
        let mut schedule = AdjustmentSchedule::none(grid, p.state_ids.clone());
        schedule.ratio[1] = 0.4;
        let hyper = StateHyper::default();
        let mut params = StageOneParams::zeros(1, 2);
        params.alpha = -3.0;
        params.delta[1] = 0.8;
        let base = stage1_log_posterior(&params, &p, &schedule, &hyper).unwrap();
        p.counts[1] = Some(7);
        let with = stage1_log_posterior(&params, &p, &schedule, &hyper).unwrap();
        let mean = 100.0 * (-3.0f64).exp() / 0.8;
        assert!((with - base - crate::stats::poisson_ln_pmf(7, mean)).abs() < 1e-12);
        params.delta[1] = 0.39;
        let v = stage1_log_posterior(&params, &p, &schedule, &hyper).unwrap();
        assert_eq!(v, f64::NEG_INFINITY);
    }

    #[test]
    fn flat_density_matches_structured_posterior() {
        let grid = YearGrid::new(2014, 2019, 2015, 2016, 2017).unwrap();
        let mut counts = Vec::new();
        for s in 0..2 {
            for t in 0..6 {
                counts.push(if t == 4 {
                    None
                } else {
                    Some(20 + 3 * s as u64 + t as u64)
                });
            }
        }
        let mut p = panel(counts, 2, grid);
        for s in 0..2 {
            for t in 0..6 {
                p.covariates.set(0, s, t, 0.1 * t as f64 - 0.2 * s as f64);
                p.covariates.set(1, s, t, (t as f64).sin());
            }
        }
        let schedule = crate::adjustment::compute_ratios(&p, &grid).unwrap();
        let model = StateModel::new(p.clone(), schedule.clone(), StateHyper::default()).unwrap();
        for x in model.initial_values(3, 4) {
            let params = model.layout.unpack(&x);
            let direct = stage1_log_posterior(&params, &p, &schedule, &model.hyper).unwrap();
            let flat = sampler::LogDensity::log_density(&model, &x);
            assert!((direct - flat).abs() < 1e-9, "{direct} vs {flat}");
            assert_eq!(model.layout.pack(&params), x);
        }
    }

    #[test]
    fn postprocess_small_cases() {
        let grid = YearGrid::new(2016, 2016, 2016, 2016, 2017);
        assert!(grid.is_err());
        let grid = one_cell_grid();
        let mut p = panel(vec![None, None], 1, grid);
        p.population = vec![1000, 1000];
        let lambda = vec![
            [0.01f64, 0.02, 0.03].iter().map(|v| v.ln()).collect::<Vec<_>>(),
            vec![0.0; 3],
        ];
        let post = postprocess_stage1(&lambda, &[vec![0.5; 3]], &[vec![1.0], vec![1.0]], &p).unwrap();
        assert!((post.pi_median[0] - 0.02).abs() < 1e-15);
        assert!((post.y_tilde[0] - 20.0).abs() < 1e-12);
        assert_eq!(post.y_tilde[0], post.pi_median[0] * 1000.0);
        assert_eq!(post.omega_median[0], 0.5);
        assert_eq!(post.omega_sd[0], 0.0);
        assert!(postprocess_stage1(&[vec![], vec![]], &[vec![0.5]], &[vec![1.0], vec![1.0]], &p).is_err());
    }

    #[test]
    fn summary_files_round_trip() {
        let grid = one_cell_grid();
        let p = panel(vec![Some(1), Some(2)], 1, grid);
        let lambda = vec![vec![-3.0, -2.9, -3.1], vec![-2.0, -2.2, -2.1]];
        let post = postprocess_stage1(&lambda, &[vec![0.1, 0.2, 0.4]], &[vec![1.0], vec![0.6, 0.7]], &p).unwrap();
        let dir = tempfile::tempdir().unwrap();
        post.write_dir(dir.path()).unwrap();
        let back = StageOnePosterior::read_dir(dir.path(), &p.state_ids, grid).unwrap();
        assert_eq!(back, post);
    }
}
