//! Synthetic truths and replicated recovery studies.
//!
//! A replicate draws spatial and temporal effects from their priors, forms
//! county risks from covariates and effects (no population offset), draws
//! county counts and sums them to state counts. The full two-stage pipeline
//! is then fitted to the state counts and scored against the truth at both
//! scales.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adjustment::AdjustmentSchedule;
use crate::county_model::{CountyHyper, CountyModel, StageTwoData, N_COUNTY_COVARIATES};
use crate::csvio;
use crate::error::{Error, Result};
use crate::geo::{build_icar_structure, GeoHierarchy, NeighborStructure};
use crate::panel::{standardize_covariates, CountyCounts, CountyPanel, CovariateTable, StatePanel, STATE_COVARIATES};
use crate::sampler::diagnostics::{fraction_above, ParamDiagnostics};
use crate::sampler::{stream_rng, McmcConfig};
use crate::state_model::{StateHyper, StateModel};
use crate::stats;

/// Fixed global parameters of the generating process.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulationParams {
    pub alpha: f64,
    pub beta: [f64; N_COUNTY_COVARIATES],
    pub tau_u: f64,
    pub tau_v: f64,
    pub tau_delta: f64,
}

impl Default for SimulationParams {
    fn default() -> Self {
        Self {
            alpha: 0.005f64.ln(),
            beta: [0.3, 0.1, 0.2, 0.1, 0.15],
            tau_u: 25.0,
            tau_v: 25.0,
            tau_delta: 25.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationTruth {
    pub params: SimulationParams,
    pub u_str: Vec<f64>,
    pub u_unstr: Vec<f64>,
    /// County cells, `county * n_years + year`.
    pub delta: Vec<f64>,
    pub eta: Vec<f64>,
    pub pi: Vec<f64>,
    pub county_counts: CountyCounts,
    /// State cells, `state * n_years + year`.
    pub state_counts: Vec<u64>,
    pub state_population: Vec<u64>,
    /// Population-weighted mean of the county risks.
    pub state_pi: Vec<f64>,
}

/// Zero-sum draw from the intrinsic CAR prior with precision `tau` on each
/// connected component; islands stay at zero.
pub fn sample_icar(structure: &NeighborStructure, tau: f64, rng: &mut impl Rng) -> Vec<f64> {
    let mut u = vec![0.0; structure.n_nodes()];
    for mode in structure.laplacian_modes().iter().flatten() {
        let z: f64 = rng.sample(StandardNormal);
        let scale = z / (tau * mode.eigenvalue).sqrt();
        for &(c, v) in &mode.loadings {
            u[c] += scale * v;
        }
    }
    u
}

/// Random walk with precision `tau` on its increments, centered to sum zero.
pub fn sample_rw1(n: usize, tau: f64, rng: &mut impl Rng) -> Vec<f64> {
    let mut x = Vec::with_capacity(n);
    let mut level = 0.0;
    for t in 0..n {
        if t > 0 {
            level += rng.sample::<f64, _>(StandardNormal) / tau.sqrt();
        }
        x.push(level);
    }
    let m = if n > 0 { stats::mean(&x) } else { 0.0 };
    x.iter().map(|v| v - m).collect()
}

pub fn generate_dataset(
    fixed: &SimulationParams,
    panel: &CountyPanel,
    geo: &GeoHierarchy,
    seed: u64,
) -> Result<SimulationTruth> {
    if !(fixed.alpha.is_finite() && fixed.beta.iter().all(|b| b.is_finite())) {
        return Err(Error::Generation("fixed parameters must be finite".into()));
    }
    if !(fixed.tau_u > 0.0 && fixed.tau_v > 0.0 && fixed.tau_delta > 0.0) {
        return Err(Error::Generation("precisions must be positive".into()));
    }
    if panel.population.contains(&0) {
        return Err(Error::Generation("county populations must be positive".into()));
    }
    if !panel.covariates.all_finite() {
        return Err(Error::Generation("county covariates must be complete".into()));
    }
    let structure = build_icar_structure(geo);
    let mut rng = stream_rng(seed, 0);
    let n_c = panel.n_counties();
    let t_n = panel.grid.n_years();

    let u_str = sample_icar(&structure, fixed.tau_u, &mut rng);
    let u_unstr: Vec<f64> = (0..n_c)
        .map(|_| rng.sample::<f64, _>(StandardNormal) / fixed.tau_v.sqrt())
        .collect();
    let mut delta = Vec::with_capacity(n_c * t_n);
    for _ in 0..n_c {
        delta.extend(sample_rw1(t_n, fixed.tau_delta, &mut rng));
    }

    let mut eta = vec![0.0; n_c * t_n];
    let mut pi = vec![0.0; n_c * t_n];
    let mut counts = vec![0u64; n_c * t_n];
    for c in 0..n_c {
        for t in 0..t_n {
            let cell = c * t_n + t;
            let mut e = fixed.alpha;
            for (j, b) in fixed.beta.iter().enumerate() {
                e += b * panel.covariates.get(j, c, t);
            }
            e += u_str[c] + u_unstr[c] + delta[cell];
            let mean = e.exp() * panel.population[cell] as f64;
            if !mean.is_finite() || mean > 1e15 {
                return Err(Error::Generation(format!(
                    "expected count overflows for {} in {}",
                    panel.county_ids[c],
                    panel.grid.year(t)
                )));
            }
            eta[cell] = e;
            pi[cell] = e.exp();
            counts[cell] = if mean > 0.0 {
                Poisson::new(mean)
                    .map_err(|e| Error::Generation(e.to_string()))?
                    .sample(&mut rng) as u64
            } else {
                0
            };
        }
    }

    let n_s = geo.n_states();
    let mut state_counts = vec![0u64; n_s * t_n];
    let mut state_population = vec![0u64; n_s * t_n];
    let mut weighted = vec![0.0; n_s * t_n];
    for c in 0..n_c {
        let s = geo.state_of(c);
        for t in 0..t_n {
            let cell = c * t_n + t;
            state_counts[s * t_n + t] += counts[cell];
            state_population[s * t_n + t] += panel.population[cell];
            weighted[s * t_n + t] += pi[cell] * panel.population[cell] as f64;
        }
    }
    let state_pi = weighted
        .iter()
        .zip(&state_population)
        .map(|(w, &n)| if n > 0 { w / n as f64 } else { f64::NAN })
        .collect();

    Ok(SimulationTruth {
        params: *fixed,
        u_str,
        u_unstr,
        delta,
        eta,
        pi,
        county_counts: CountyCounts { n_years: t_n, counts },
        state_counts,
        state_population,
        state_pi,
    })
}

/// State panel for a synthetic replicate. The two state covariates are
/// population-weighted means of the first two county covariates,
/// standardized.
pub fn state_panel_from_truth(truth: &SimulationTruth, panel: &CountyPanel, geo: &GeoHierarchy) -> Result<StatePanel> {
    let t_n = panel.grid.n_years();
    let n_s = geo.n_states();
    let mut cov = CovariateTable::new(&STATE_COVARIATES, n_s, t_n);
    for s in 0..n_s {
        for t in 0..t_n {
            let total = truth.state_population[s * t_n + t] as f64;
            for j in 0..STATE_COVARIATES.len() {
                let v: f64 = geo
                    .counties_in(s)
                    .iter()
                    .map(|&c| panel.covariates.get(j, c, t) * panel.population(c, t) as f64)
                    .sum();
                cov.set(j, s, t, v / total);
            }
        }
    }
    let raw = StatePanel {
        grid: panel.grid,
        state_ids: geo.state_ids(),
        counts: truth.state_counts.iter().map(|&y| Some(y)).collect(),
        population: truth.state_population.clone(),
        covariates: cov,
    };
    standardize_covariates(&raw)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub me: f64,
    pub mde: f64,
    pub mae: f64,
    pub mre: f64,
    pub mse: f64,
    pub coverage: f64,
    pub n_cells: usize,
    /// Cells left out of the relative error because their truth is zero.
    pub mre_excluded: usize,
}

pub fn compute_metrics(estimates: &[f64], truths: &[f64], intervals: &[(f64, f64)]) -> Result<Metrics> {
    if estimates.is_empty() {
        return Err(Error::Empty("no cells to score".into()));
    }
    if estimates.len() != truths.len() || estimates.len() != intervals.len() {
        return Err(Error::Validation(vec![
            "estimates, truths and intervals must align".into()
        ]));
    }
    let err: Vec<f64> = estimates.iter().zip(truths).map(|(e, t)| e - t).collect();
    let abs: Vec<f64> = err.iter().map(|e| e.abs()).collect();
    let rel: Vec<f64> = err
        .iter()
        .zip(truths)
        .filter(|(_, &t)| t != 0.0)
        .map(|(e, t)| (e / t).abs())
        .collect();
    let covered = intervals
        .iter()
        .zip(truths)
        .filter(|((lo, hi), t)| lo <= t && *t <= hi)
        .count();
    let n = estimates.len();
    Ok(Metrics {
        me: stats::mean(&err),
        mde: stats::median(&err)?,
        mae: stats::median(&abs)?,
        mre: if rel.is_empty() { f64::NAN } else { stats::median(&rel)? },
        mse: err.iter().map(|e| e * e).sum::<f64>() / n as f64,
        coverage: covered as f64 / n as f64,
        n_cells: n,
        mre_excluded: n - rel.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulationConfig {
    pub replicates: usize,
    pub seed: u64,
    pub params: SimulationParams,
    pub state_mcmc: McmcConfig,
    pub county_mcmc: McmcConfig,
    pub state_hyper: StateHyper,
    pub county_hyper: CountyHyper,
    /// A replicate is flagged when more than `max_unconverged` of its
    /// monitored quantities have R-hat above `rhat_threshold`.
    pub rhat_threshold: f64,
    pub max_unconverged: f64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            replicates: 20,
            seed: 20250101,
            params: SimulationParams::default(),
            state_mcmc: McmcConfig::default(),
            county_mcmc: McmcConfig::default(),
            state_hyper: StateHyper::default(),
            county_hyper: CountyHyper::default(),
            rhat_threshold: 1.1,
            max_unconverged: 0.05,
        }
    }
}

/// Cell-level estimates of one scale, kept for pooling across replicates.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScaleCells {
    pub estimates: Vec<f64>,
    pub truths: Vec<f64>,
    pub intervals: Vec<(f64, f64)>,
}

impl ScaleCells {
    fn metrics(&self) -> Result<Metrics> {
        compute_metrics(&self.estimates, &self.truths, &self.intervals)
    }
}

#[derive(Debug, Clone)]
pub struct ReplicateResult {
    pub replicate: usize,
    pub seed: u64,
    pub state: Metrics,
    pub county: Metrics,
    pub state_cells: ScaleCells,
    pub county_cells: ScaleCells,
    pub state_diagnostics: Vec<ParamDiagnostics>,
    pub county_diagnostics: Vec<ParamDiagnostics>,
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct SimulationReport {
    pub config: SimulationConfig,
    pub state: Metrics,
    pub county: Metrics,
    pub replicates: Vec<ReplicateResult>,
}

impl SimulationReport {
    pub fn n_flagged(&self) -> usize {
        self.replicates.iter().filter(|r| !r.converged).count()
    }
}

/// Seed of replicate `m`, derived from the study seed.
pub fn replicate_seed(seed: u64, m: usize) -> u64 {
    stream_rng(seed, 1_000_000 + m as u64).random()
}

/// Generates one dataset and fits both stages to it.
pub fn run_replicate(
    geo: &GeoHierarchy,
    panel: &CountyPanel,
    config: &SimulationConfig,
    m: usize,
) -> Result<ReplicateResult> {
    let seed = replicate_seed(config.seed, m);
    let truth = generate_dataset(&config.params, panel, geo, seed)?;
    let state_panel = state_panel_from_truth(&truth, panel, geo)?;
    // the synthetic counts have no definition change
    let schedule = AdjustmentSchedule::none(panel.grid, state_panel.state_ids.clone());
    let state_model = StateModel::new(state_panel, schedule, config.state_hyper)?;
    let state_mcmc = McmcConfig {
        seed: seed ^ 0x51,
        ..config.state_mcmc
    };
    let stage1 = state_model.fit(&state_mcmc)?;

    let data = StageTwoData::new(panel.clone(), geo, &stage1.posterior, Some(truth.county_counts.clone()))?;
    let county_model = CountyModel::new(data, config.county_hyper)?;
    let county_mcmc = McmcConfig {
        seed: seed ^ 0x52,
        ..config.county_mcmc
    };
    let stage2 = county_model.fit(&county_mcmc)?;

    let p1 = &stage1.posterior;
    let state_cells = ScaleCells {
        estimates: p1.pi_median.clone(),
        truths: truth.state_pi.clone(),
        intervals: p1.pi_lo.iter().copied().zip(p1.pi_hi.iter().copied()).collect(),
    };
    let p2 = &stage2.posterior;
    let county_cells = ScaleCells {
        estimates: p2.pi_median.clone(),
        truths: truth.pi.clone(),
        intervals: p2.pi_lo.iter().copied().zip(p2.pi_hi.iter().copied()).collect(),
    };
    let gate = |d: &[ParamDiagnostics]| fraction_above(d, config.rhat_threshold) <= config.max_unconverged;
    let converged = gate(&stage1.diagnostics) && gate(&stage2.diagnostics);
    Ok(ReplicateResult {
        replicate: m,
        seed,
        state: state_cells.metrics()?,
        county: county_cells.metrics()?,
        state_cells,
        county_cells,
        state_diagnostics: stage1.diagnostics,
        county_diagnostics: stage2.diagnostics,
        converged,
    })
}

/// Runs `config.replicates` independent replicates (in parallel) and pools
/// their cells into aggregate metrics. Flagged replicates stay in.
pub fn run_simulation_study(
    geo: &GeoHierarchy,
    panel: &CountyPanel,
    config: &SimulationConfig,
) -> Result<SimulationReport> {
    if config.replicates == 0 {
        return Err(Error::Config("at least one replicate is required".into()));
    }
    config.state_mcmc.validate()?;
    config.county_mcmc.validate()?;
    let replicates = (0..config.replicates)
        .into_par_iter()
        .map(|m| run_replicate(geo, panel, config, m))
        .collect::<Result<Vec<_>>>()?;
    let pool = |pick: fn(&ReplicateResult) -> &ScaleCells| -> Result<Metrics> {
        let mut all = ScaleCells::default();
        for r in &replicates {
            let cells = pick(r);
            all.estimates.extend_from_slice(&cells.estimates);
            all.truths.extend_from_slice(&cells.truths);
            all.intervals.extend_from_slice(&cells.intervals);
        }
        all.metrics()
    };
    Ok(SimulationReport {
        config: config.clone(),
        state: pool(|r| &r.state_cells)?,
        county: pool(|r| &r.county_cells)?,
        replicates,
    })
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ReportRow {
    pub scale: String,
    pub replicates: usize,
    pub flagged: usize,
    pub me: f64,
    pub mde: f64,
    pub mae: f64,
    pub mre: f64,
    pub mse: f64,
    pub coverage: f64,
    pub n_cells: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ReplicateRow {
    pub replicate: usize,
    pub seed: u64,
    pub scale: String,
    pub me: f64,
    pub mde: f64,
    pub mae: f64,
    pub mre: f64,
    pub mse: f64,
    pub coverage: f64,
    pub n_cells: usize,
    pub max_rhat: f64,
    pub converged: bool,
}

impl SimulationReport {
    pub fn rows(&self) -> Vec<ReportRow> {
        let flagged = self.n_flagged();
        [("state", &self.state), ("county", &self.county)]
            .into_iter()
            .map(|(scale, m)| ReportRow {
                scale: scale.into(),
                replicates: self.replicates.len(),
                flagged,
                me: m.me,
                mde: m.mde,
                mae: m.mae,
                mre: m.mre,
                mse: m.mse,
                coverage: m.coverage,
                n_cells: m.n_cells,
            })
            .collect()
    }

    pub fn replicate_rows(&self) -> Vec<ReplicateRow> {
        let max_rhat = |d: &[ParamDiagnostics]| d.iter().filter(|d| !d.degenerate).map(|d| d.rhat).fold(1.0, f64::max);
        self.replicates
            .iter()
            .flat_map(|r| {
                [
                    ("state", &r.state, max_rhat(&r.state_diagnostics)),
                    ("county", &r.county, max_rhat(&r.county_diagnostics)),
                ]
                .into_iter()
                .map(move |(scale, m, rhat)| ReplicateRow {
                    replicate: r.replicate,
                    seed: r.seed,
                    scale: scale.into(),
                    me: m.me,
                    mde: m.mde,
                    mae: m.mae,
                    mre: m.mre,
                    mse: m.mse,
                    coverage: m.coverage,
                    n_cells: m.n_cells,
                    max_rhat: rhat,
                    converged: r.converged,
                })
            })
            .collect()
    }

    /// Writes `simulation_report.{csv,json}` and
    /// `simulation_replicates.{csv,json}` into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        let rows = self.rows();
        let reps = self.replicate_rows();
        csvio::write_rows(&dir.join("simulation_report.csv"), &rows)?;
        csvio::write_rows(&dir.join("simulation_replicates.csv"), &reps)?;
        #[derive(Serialize)]
        struct Doc<'a, T> {
            params: &'a SimulationParams,
            replicates: usize,
            seed: u64,
            rows: &'a [T],
        }
        let write_json = |name: &str, body: String| -> Result<()> {
            let path = dir.join(name);
            std::fs::write(&path, body + "\n").map_err(|e| Error::io(&path, e))
        };
        let report = Doc {
            params: &self.config.params,
            replicates: self.replicates.len(),
            seed: self.config.seed,
            rows: &rows,
        };
        write_json("simulation_report.json", to_json(&report)?)?;
        let per_replicate = Doc {
            params: &self.config.params,
            replicates: self.replicates.len(),
            seed: self.config.seed,
            rows: &reps,
        };
        write_json("simulation_replicates.json", to_json(&per_replicate)?)
    }
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value).map_err(|e| Error::Config(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::{County, State};
    use crate::panel::{YearGrid, COUNTY_COVARIATES};
    use crate::synthetic::{desk_fixture, FixtureSpec};
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    /// One state of unconnected counties with zero covariates.
    fn flat_panel(n_c: usize, population: u64) -> (GeoHierarchy, CountyPanel) {
        let grid = YearGrid {
            first_year: 2014,
            last_year: 2021,
            ref_year: 2015,
            anchor_year: 2016,
            change_year: 2017,
        };
        let states = vec![State {
            state_id: "S".into(),
            name: "S".into(),
        }];
        let counties: Vec<County> = (0..n_c)
            .map(|c| County {
                county_id: format!("C{c:04}"),
                state_id: "S".into(),
                name: format!("C{c}"),
            })
            .collect();
        let geo = GeoHierarchy::new(states, counties, Vec::<(String, String)>::new()).unwrap();
        let t_n = grid.n_years();
        let mut covariates = CovariateTable::new(&COUNTY_COVARIATES, n_c, t_n);
        covariates.columns.iter_mut().flatten().for_each(|v| *v = 0.0);
        let panel = CountyPanel {
            grid,
            county_ids: geo.county_ids(),
            population: vec![population; n_c * t_n],
            covariates,
        };
        (geo, panel)
    }

    #[test]
    fn constant_risk_recovered_by_sample_mean() {
        let (geo, panel) = flat_panel(1250, 10_000);
        let fixed = SimulationParams {
            alpha: 0.01f64.ln(),
            beta: [0.0; N_COUNTY_COVARIATES],
            tau_u: 1e16,
            tau_v: 1e16,
            tau_delta: 1e16,
        };
        let truth = generate_dataset(&fixed, &panel, &geo, 42).unwrap();
        assert!(truth.pi.iter().all(|&p| close(p, 0.01, 1e-9)));
        let rates: Vec<f64> = truth
            .county_counts
            .counts
            .iter()
            .map(|&k| k as f64 / 10_000.0)
            .collect();
        assert_eq!(rates.len(), 10_000);
        let m = stats::mean(&rates);
        assert!((0.0097..=0.0103).contains(&m), "{m}");
    }

    #[test]
    fn datasets_reproducible_and_aggregate() {
        let f = desk_fixture(&FixtureSpec::default()).unwrap();
        let p = SimulationParams::default();
        let a = generate_dataset(&p, &f.county_panel, &f.geo, 9).unwrap();
        let b = generate_dataset(&p, &f.county_panel, &f.geo, 9).unwrap();
        let c = generate_dataset(&p, &f.county_panel, &f.geo, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.county_counts, c.county_counts);
        let t_n = f.spec.grid.n_years();
        for s in 0..f.geo.n_states() {
            for t in 0..t_n {
                let counties = f.geo.counties_in(s);
                let sum: u64 = counties.iter().map(|&c| a.county_counts.get(c, t)).sum();
                assert_eq!(sum, a.state_counts[s * t_n + t]);
                let pop: u64 = counties.iter().map(|&c| f.county_panel.population(c, t)).sum();
                let w: f64 = counties
                    .iter()
                    .map(|&c| a.pi[c * t_n + t] * f.county_panel.population(c, t) as f64)
                    .sum();
                assert!(close(a.state_pi[s * t_n + t], w / pop as f64, 1e-15));
            }
        }
        assert!(a
            .pi
            .iter()
            .zip(&a.eta)
            .all(|(p, e)| *p > 0.0 && close(*p, e.exp(), 0.0)));
    }

    #[test]
    fn icar_draw_sums_to_zero_per_component() {
        let f = desk_fixture(&FixtureSpec {
            islands: 2,
            ..FixtureSpec::default()
        })
        .unwrap();
        let s = build_icar_structure(&f.geo);
        let u = sample_icar(&s, 4.0, &mut stream_rng(1, 0));
        for comp in &s.components {
            let sum: f64 = comp.iter().map(|&c| u[c]).sum();
            assert!(sum.abs() < 1e-10);
        }
        for (c, &island) in s.islands.iter().enumerate() {
            if island {
                assert_eq!(u[c], 0.0);
            }
        }
    }

    #[test]
    fn overflow_is_a_generation_error() {
        let (geo, panel) = flat_panel(2, 1_000_000);
        let fixed = SimulationParams {
            alpha: 40.0,
            ..SimulationParams::default()
        };
        assert!(matches!(
            generate_dataset(&fixed, &panel, &geo, 1),
            Err(Error::Generation(_))
        ));
    }

    #[test]
    fn metrics_of_perfect_and_shifted_estimators() {
        let truths = [0.02, 0.03, 0.05, 0.01];
        let wide = vec![(f64::NEG_INFINITY, f64::INFINITY); 4];
        let m = compute_metrics(&truths, &truths, &wide).unwrap();
        assert_eq!((m.me, m.mde, m.mae, m.mre, m.mse), (0.0, 0.0, 0.0, 0.0, 0.0));
        assert_eq!(m.coverage, 1.0);

        let shifted: Vec<f64> = truths.iter().map(|t| t + 0.01).collect();
        let m = compute_metrics(&shifted, &truths, &wide).unwrap();
        assert!(close(m.me, 0.01, 1e-12) && close(m.mde, 0.01, 1e-12) && close(m.mae, 0.01, 1e-12));
        assert!(close(m.mse, 1e-4, 1e-12));

        let empty = vec![(1.0, 0.0); 4];
        assert_eq!(compute_metrics(&shifted, &truths, &empty).unwrap().coverage, 0.0);
    }

    #[test]
    fn metrics_hand_computed() {
        let m = compute_metrics(&[1.1, 0.9], &[1.0, 1.0], &[(0.8, 1.2), (1.05, 1.3)]).unwrap();
        assert!(close(m.me, 0.0, 1e-12));
        assert!(close(m.mae, 0.1, 1e-12));
        assert!(close(m.mre, 0.1, 1e-12));
        assert!(close(m.mse, 0.01, 1e-12));
        assert_eq!(m.coverage, 0.5);
    }

    #[test]
    fn metrics_errors_and_zero_truth() {
        assert!(matches!(compute_metrics(&[], &[], &[]), Err(Error::Empty(_))));
        assert!(compute_metrics(&[1.0], &[1.0, 2.0], &[(0.0, 1.0)]).is_err());
        let m = compute_metrics(&[0.1, 1.2], &[0.0, 1.0], &[(0.0, 1.0); 2]).unwrap();
        assert_eq!(m.mre_excluded, 1);
        assert!(close(m.mre, 0.2, 1e-12));
    }

    #[test]
    fn unbiased_estimator_has_small_mean_error() {
        use rand_distr::Normal;
        let mut rng = stream_rng(17, 0);
        let noise = Normal::new(0.0, 0.002).unwrap();
        let truths: Vec<f64> = (0..10_000).map(|i| 0.01 + 1e-6 * i as f64).collect();
        let est: Vec<f64> = truths.iter().map(|t| t + noise.sample(&mut rng)).collect();
        let m = compute_metrics(&est, &truths, &vec![(0.0, 1.0); 10_000]).unwrap();
        let se = 0.002 / 100.0;
        assert!(m.me.abs() < 3.0 * se, "{}", m.me);
    }

    proptest! {
        #[test]
        fn metrics_invariants(
            cells in prop::collection::vec((0.001f64..1.0, -0.5f64..0.5, 0.0f64..0.3, 0.0f64..0.3), 1..60),
            rot in 0usize..60,
        ) {
            let truths: Vec<f64> = cells.iter().map(|c| c.0).collect();
            let est: Vec<f64> = cells.iter().map(|c| c.0 + c.1).collect();
            let iv: Vec<(f64, f64)> = cells.iter().map(|c| (c.0 + c.1 - c.2, c.0 + c.1 + c.3)).collect();
            let m = compute_metrics(&est, &truths, &iv).unwrap();
            prop_assert!(m.mae >= 0.0 && m.mse >= 0.0);
            prop_assert!((0.0..=1.0).contains(&m.coverage));
            prop_assert!(m.mae + 1e-15 >= m.mde.abs());

            let k = rot % cells.len();
            let rotate = |v: &[f64]| [&v[k..], &v[..k]].concat();
            let mut iv2 = iv.clone();
            iv2.rotate_left(k);
            let p = compute_metrics(&rotate(&est), &rotate(&truths), &iv2).unwrap();
            prop_assert!((p.me - m.me).abs() < 1e-12);
            prop_assert!((p.mse - m.mse).abs() < 1e-12);
            prop_assert_eq!((p.mde, p.mae, p.mre, p.coverage), (m.mde, m.mae, m.mre, m.coverage));
        }
    }

    #[test]
    fn single_replicate_report_matches_its_metrics() {
        let f = desk_fixture(&FixtureSpec {
            n_states: 2,
            rows: 2,
            cols: 2,
            ..FixtureSpec::default()
        })
        .unwrap();
        let short = McmcConfig {
            chains: 2,
            iterations: 600,
            burn_in: 300,
            thin: 1,
            ..McmcConfig::default()
        };
        let config = SimulationConfig {
            replicates: 1,
            state_mcmc: short,
            county_mcmc: short,
            ..SimulationConfig::default()
        };
        let report = run_simulation_study(&f.geo, &f.county_panel, &config).unwrap();
        let r = &report.replicates[0];
        assert_eq!(report.state, r.state);
        assert_eq!(report.county, r.county);
        assert_eq!(report.rows().len(), 2);
        assert_eq!(report.replicate_rows().len(), 2);
        let again = run_simulation_study(&f.geo, &f.county_panel, &config).unwrap();
        assert_eq!(again.state, report.state);
        assert_eq!(again.county, report.county);
    }
}
