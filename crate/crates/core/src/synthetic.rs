//! Synthetic fixtures: a small lattice geography with county and state
//! panels whose counts come from the simulation model.
//!
//! State counts after the definition change are inflated by a known factor,
//! so the state fit has a real adjustment to recover.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{County, GeoHierarchy, State};
use crate::panel::{
    interpolate_missing_covariates, standardize_covariates, write_county_counts, write_county_panel, write_state_panel,
    CountyPanel, CovariateTable, StatePanel, YearGrid, COUNTY_COVARIATES, STATE_COVARIATES,
};
use crate::sampler::stream_rng;
use crate::simulation::{generate_dataset, SimulationParams, SimulationTruth};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FixtureSpec {
    pub n_states: usize,
    /// Counties per state, laid out on a `rows x cols` lattice.
    pub rows: usize,
    pub cols: usize,
    pub grid: YearGrid,
    pub seed: u64,
    /// Multiplier of the true mean count from the change year on; the
    /// adjustment factor to recover is its reciprocal.
    pub inflation: f64,
    /// State counts after this year are left missing.
    pub last_observed_year: Option<i32>,
    /// Years at the end of the grid whose first county covariate is missing.
    pub covariate_tail_gap: usize,
    /// Counties that get no neighbors.
    pub islands: usize,
    pub params: SimulationParams,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self {
            n_states: 3,
            rows: 3,
            cols: 4,
            grid: YearGrid {
                first_year: 2014,
                last_year: 2021,
                ref_year: 2015,
                anchor_year: 2016,
                change_year: 2017,
            },
            seed: 7,
            inflation: 1.35,
            last_observed_year: None,
            covariate_tail_gap: 1,
            islands: 0,
            params: SimulationParams::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Fixture {
    pub spec: FixtureSpec,
    pub geo: GeoHierarchy,
    /// As written to disk: raw covariates with the tail gap.
    pub county_panel_raw: CountyPanel,
    /// Interpolated and standardized, as fitted.
    pub county_panel: CountyPanel,
    pub state_panel_raw: StatePanel,
    pub truth: SimulationTruth,
}

fn lattice(spec: &FixtureSpec) -> Result<GeoHierarchy> {
    let states: Vec<State> = (0..spec.n_states)
        .map(|s| State {
            state_id: format!("S{}", s + 1),
            name: format!("State {}", s + 1),
        })
        .collect();
    let id = |s: usize, r: usize, c: usize| format!("S{}C{:02}", s + 1, r * spec.cols + c + 1);
    let mut counties = Vec::new();
    let mut pairs = Vec::new();
    let per_state = spec.rows * spec.cols;
    let isolated = |s: usize, r: usize, c: usize| {
        // the last counties of the last state become islands
        s + 1 == spec.n_states && r * spec.cols + c >= per_state - spec.islands.min(per_state)
    };
    for (s, state) in states.iter().enumerate() {
        for r in 0..spec.rows {
            for c in 0..spec.cols {
                counties.push(County {
                    county_id: id(s, r, c),
                    state_id: state.state_id.clone(),
                    name: format!("County {} of state {}", r * spec.cols + c + 1, s + 1),
                });
                if isolated(s, r, c) {
                    continue;
                }
                if c + 1 < spec.cols && !isolated(s, r, c + 1) {
                    pairs.push((id(s, r, c), id(s, r, c + 1)));
                }
                if r + 1 < spec.rows && !isolated(s, r + 1, c) {
                    pairs.push((id(s, r, c), id(s, r + 1, c)));
                }
                // states sit side by side; the right column borders the next state
                if c + 1 == spec.cols && s + 1 < spec.n_states && !isolated(s + 1, r, 0) {
                    pairs.push((id(s, r, c), id(s + 1, r, 0)));
                }
            }
        }
    }
    GeoHierarchy::new(states, counties, pairs)
}

/// Smooth series: a unit level plus a linear trend plus small noise.
fn series(rng: &mut impl Rng, level: f64, spread: f64, trend: f64, noise: f64, n: usize) -> Vec<f64> {
    let base = level + spread * rng.sample::<f64, _>(StandardNormal);
    let slope = trend * (1.0 + 0.5 * rng.sample::<f64, _>(StandardNormal));
    (0..n)
        .map(|t| base + slope * t as f64 + noise * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

pub fn desk_fixture(spec: &FixtureSpec) -> Result<Fixture> {
    spec.grid.validate()?;
    if spec.n_states == 0 || spec.rows * spec.cols == 0 {
        return Err(Error::Config("fixture needs at least one state and county".into()));
    }
    if !(spec.inflation > 0.0) {
        return Err(Error::Config("inflation must be positive".into()));
    }
    let geo = lattice(spec)?;
    let t_n = spec.grid.n_years();
    let n_c = geo.n_counties();
    let mut rng = stream_rng(spec.seed, 0);

    let mut cov = CovariateTable::new(&COUNTY_COVARIATES, n_c, t_n);
    // (level, spread across counties, yearly trend, noise)
    let shapes = [
        (18.0, 6.0, 1.2, 0.8),
        (45.0, 20.0, -0.2, 0.5),
        (14.0, 4.0, -0.3, 0.4),
        (15.0, 3.0, 0.1, 0.3),
        (120.0, 40.0, 12.0, 3.0),
    ];
    let mut population = vec![0u64; n_c * t_n];
    for c in 0..n_c {
        for (j, &(level, spread, trend, noise)) in shapes.iter().enumerate() {
            let v = series(&mut rng, level, spread, trend, noise, t_n);
            for (t, x) in v.into_iter().enumerate() {
                let missing = j == 0 && t + spec.covariate_tail_gap >= t_n && t >= 2;
                cov.set(j, c, t, if missing { f64::NAN } else { x.max(0.0) });
            }
        }
        let base = (10.8 + 0.7 * rng.sample::<f64, _>(StandardNormal)).exp();
        let growth = 0.005 * rng.sample::<f64, _>(StandardNormal);
        for t in 0..t_n {
            population[c * t_n + t] = (base * (1.0 + growth).powi(t as i32)).round().max(500.0) as u64;
        }
    }
    let county_panel_raw = CountyPanel {
        grid: spec.grid,
        county_ids: geo.county_ids(),
        population,
        covariates: cov,
    };
    let county_panel = standardize_covariates(&interpolate_missing_covariates(&county_panel_raw)?)?;
    let truth = generate_dataset(&spec.params, &county_panel, &geo, spec.seed ^ 0x7ea1)?;

    let n_s = geo.n_states();
    let mut state_cov = CovariateTable::new(&STATE_COVARIATES, n_s, t_n);
    for s in 0..n_s {
        for (j, (level, spread, trend)) in [(4.5, 0.6, -0.1), (0.35, 0.1, 0.01)].into_iter().enumerate() {
            let v = series(&mut rng, level, spread, trend, 0.05 * level, t_n);
            for (t, x) in v.into_iter().enumerate() {
                state_cov.set(j, s, t, x.max(0.0));
            }
        }
    }
    let change = spec.grid.index(spec.grid.change_year).unwrap_or(t_n);
    let mut counts = Vec::with_capacity(n_s * t_n);
    for s in 0..n_s {
        for t in 0..t_n {
            let cell = s * t_n + t;
            if spec.last_observed_year.is_some_and(|y| spec.grid.year(t) > y) {
                counts.push(None);
                continue;
            }
            let mut mean = truth.state_pi[cell] * truth.state_population[cell] as f64;
            if t >= change {
                mean *= spec.inflation;
            }
            let y = Poisson::new(mean)
                .map_err(|e| Error::Generation(e.to_string()))?
                .sample(&mut rng) as u64;
            counts.push(Some(y));
        }
    }
    let state_panel_raw = StatePanel {
        grid: spec.grid,
        state_ids: geo.state_ids(),
        counts,
        population: truth.state_population.clone(),
        covariates: state_cov,
    };
    Ok(Fixture {
        spec: *spec,
        geo,
        county_panel_raw,
        county_panel,
        state_panel_raw,
        truth,
    })
}

impl Fixture {
    /// Writes the geography, both panels and the county counts as CSV.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.geo.write_dir(dir)?;
        write_state_panel(&dir.join("state_panel.csv"), &self.state_panel_raw)?;
        write_county_panel(&dir.join("county_panel.csv"), &self.county_panel_raw)?;
        write_county_counts(
            &dir.join("county_counts.csv"),
            &self.county_panel.county_ids,
            &self.spec.grid,
            &self.truth.county_counts,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::build_icar_structure;

    #[test]
    fn default_fixture_shape() {
        let f = desk_fixture(&FixtureSpec::default()).unwrap();
        assert_eq!(f.geo.n_states(), 3);
        assert_eq!(f.geo.n_counties(), 36);
        let s = build_icar_structure(&f.geo);
        assert_eq!(s.components.len(), 1);
        assert!(s.islands.iter().all(|i| !i));
        assert!(f.county_panel.covariates.all_finite());
        assert!(!f.county_panel_raw.covariates.all_finite());
        for s in 0..3 {
            for t in 0..8 {
                let total: u64 = f
                    .geo
                    .counties_in(s)
                    .iter()
                    .map(|&c| f.truth.county_counts.get(c, t))
                    .sum();
                assert_eq!(total, f.truth.state_counts[s * 8 + t]);
            }
        }
    }

    #[test]
    fn islands_and_missing_tail() {
        let spec = FixtureSpec {
            islands: 2,
            last_observed_year: Some(2019),
            ..FixtureSpec::default()
        };
        let f = desk_fixture(&spec).unwrap();
        let s = build_icar_structure(&f.geo);
        assert_eq!(s.islands.iter().filter(|&&i| i).count(), 2);
        assert!(f.state_panel_raw.count(0, 6).is_none());
        assert!(f.state_panel_raw.count(0, 5).is_some());
    }

    #[test]
    fn written_fixture_loads_back() {
        let f = desk_fixture(&FixtureSpec::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        f.write_dir(dir.path()).unwrap();
        let geo = crate::geo::load_geography(
            &dir.path().join("states.csv"),
            &dir.path().join("counties.csv"),
            &dir.path().join("adjacency.csv"),
        )
        .unwrap();
        assert_eq!(geo.edges(), f.geo.edges());
        let panel = crate::panel::load_county_panel(&dir.path().join("county_panel.csv"), &geo, f.spec.grid).unwrap();
        assert_eq!(panel.population, f.county_panel_raw.population);
        let counts =
            crate::panel::load_county_counts(&dir.path().join("county_counts.csv"), &geo, f.spec.grid).unwrap();
        assert_eq!(counts, f.truth.county_counts);
    }
}
