//! Unit-by-year panels, the year grid and covariate preprocessing.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::csvio;
use crate::error::{Error, Result};
use crate::geo::GeoHierarchy;

pub const STATE_COVARIATES: [&str; 2] = ["pr_misuse", "heroin"];
pub const COUNTY_COVARIATES: [&str; 5] = [
    "opioid_mortality",
    "pct_rural",
    "poverty",
    "disability",
    "cum_opioid_rate",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct YearGrid {
    pub first_year: i32,
    pub last_year: i32,
    /// Year whose temporal effect carries the proper anchor term.
    pub ref_year: i32,
    /// Last year with the original case definition; ratios are taken against it.
    pub anchor_year: i32,
    pub change_year: i32,
}

impl YearGrid {
    pub fn new(first_year: i32, last_year: i32, ref_year: i32, anchor_year: i32, change_year: i32) -> Result<Self> {
        let grid = Self {
            first_year,
            last_year,
            ref_year,
            anchor_year,
            change_year,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.first_year <= self.ref_year && self.ref_year <= self.last_year) {
            problems.push(format!(
                "ref_year {} outside [{}, {}]",
                self.ref_year, self.first_year, self.last_year
            ));
        }
        if !(self.first_year <= self.anchor_year
            && self.anchor_year < self.change_year
            && self.change_year <= self.last_year)
        {
            problems.push(format!(
                "need first_year <= anchor_year < change_year <= last_year, got {} / {} / {} / {}",
                self.first_year, self.anchor_year, self.change_year, self.last_year
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }

    pub fn n_years(&self) -> usize {
        (self.last_year - self.first_year + 1) as usize
    }

    pub fn years(&self) -> impl Iterator<Item = i32> {
        self.first_year..=self.last_year
    }

    pub fn index(&self, year: i32) -> Option<usize> {
        (self.first_year..=self.last_year)
            .contains(&year)
            .then(|| (year - self.first_year) as usize)
    }

    pub fn year(&self, index: usize) -> i32 {
        self.first_year + index as i32
    }

    pub fn ref_index(&self) -> usize {
        (self.ref_year - self.first_year) as usize
    }

    pub fn anchor_index(&self) -> usize {
        (self.anchor_year - self.first_year) as usize
    }
}

/// Covariate columns over a dense `unit * n_years + year` cell layout.
/// Missing cells hold `NaN` until interpolated.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateTable {
    pub names: Vec<String>,
    pub n_units: usize,
    pub n_years: usize,
    /// One vector per covariate, each of length `n_units * n_years`.
    pub columns: Vec<Vec<f64>>,
}

impl CovariateTable {
    pub fn new(names: &[&str], n_units: usize, n_years: usize) -> Self {
        Self {
            names: names.iter().map(|s| s.to_string()).collect(),
            n_units,
            n_years,
            columns: vec![vec![f64::NAN; n_units * n_years]; names.len()],
        }
    }

    #[inline]
    pub fn get(&self, j: usize, unit: usize, t: usize) -> f64 {
        self.columns[j][unit * self.n_years + t]
    }

    pub fn set(&mut self, j: usize, unit: usize, t: usize, v: f64) {
        self.columns[j][unit * self.n_years + t] = v;
    }

    pub fn n_covariates(&self) -> usize {
        self.columns.len()
    }

    pub fn all_finite(&self) -> bool {
        self.columns.iter().flatten().all(|v| v.is_finite())
    }
}

/// Access to the covariates of either panel type, so preprocessing is shared.
pub trait Panel: Clone {
    fn covariates(&self) -> &CovariateTable;
    fn covariates_mut(&mut self) -> &mut CovariateTable;
    fn unit_id(&self, unit: usize) -> &str;
}

#[derive(Debug, Clone, PartialEq)]
pub struct StatePanel {
    pub grid: YearGrid,
    pub state_ids: Vec<String>,
    pub counts: Vec<Option<u64>>,
    pub population: Vec<u64>,
    pub covariates: CovariateTable,
}

impl StatePanel {
    pub fn n_states(&self) -> usize {
        self.state_ids.len()
    }

    #[inline]
    pub fn cell(&self, s: usize, t: usize) -> usize {
        s * self.grid.n_years() + t
    }

    pub fn count(&self, s: usize, t: usize) -> Option<u64> {
        self.counts[self.cell(s, t)]
    }

    pub fn population(&self, s: usize, t: usize) -> u64 {
        self.population[self.cell(s, t)]
    }
}

impl Panel for StatePanel {
    fn covariates(&self) -> &CovariateTable {
        &self.covariates
    }
    fn covariates_mut(&mut self) -> &mut CovariateTable {
        &mut self.covariates
    }
    fn unit_id(&self, unit: usize) -> &str {
        &self.state_ids[unit]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CountyPanel {
    pub grid: YearGrid,
    pub county_ids: Vec<String>,
    pub population: Vec<u64>,
    pub covariates: CovariateTable,
}

impl CountyPanel {
    pub fn n_counties(&self) -> usize {
        self.county_ids.len()
    }

    #[inline]
    pub fn cell(&self, c: usize, t: usize) -> usize {
        c * self.grid.n_years() + t
    }

    pub fn population(&self, c: usize, t: usize) -> u64 {
        self.population[self.cell(c, t)]
    }
}

impl Panel for CountyPanel {
    fn covariates(&self) -> &CovariateTable {
        &self.covariates
    }
    fn covariates_mut(&mut self) -> &mut CovariateTable {
        &mut self.covariates
    }
    fn unit_id(&self, unit: usize) -> &str {
        &self.county_ids[unit]
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct StateRow {
    state_id: String,
    year: i32,
    count: Option<u64>,
    population: u64,
    pr_misuse: Option<f64>,
    heroin: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CountyRow {
    county_id: String,
    year: i32,
    population: u64,
    opioid_mortality: Option<f64>,
    pct_rural: Option<f64>,
    poverty: Option<f64>,
    disability: Option<f64>,
    cum_opioid_rate: Option<f64>,
}

/// Observed county-year counts, available for synthetic data only.
#[derive(Debug, Clone, PartialEq)]
pub struct CountyCounts {
    pub n_years: usize,
    pub counts: Vec<u64>,
}

impl CountyCounts {
    pub fn get(&self, c: usize, t: usize) -> u64 {
        self.counts[c * self.n_years + t]
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CountyCountRow {
    county_id: String,
    year: i32,
    count: u64,
}

fn opt(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

/// Tracks which dense cells have been filled so gaps and duplicates can be reported.
struct CellTracker {
    seen: Vec<bool>,
    problems: Vec<String>,
}

impl CellTracker {
    fn new(n: usize) -> Self {
        Self {
            seen: vec![false; n],
            problems: Vec::new(),
        }
    }

    fn mark(&mut self, cell: usize, what: impl FnOnce() -> String) -> bool {
        if std::mem::replace(&mut self.seen[cell], true) {
            self.problems.push(format!("duplicate row for {}", what()));
            return false;
        }
        true
    }

    fn finish(mut self, ids: &[String], grid: &YearGrid) -> Result<()> {
        let t_n = grid.n_years();
        for (cell, seen) in self.seen.iter().enumerate() {
            if !seen {
                self.problems.push(format!(
                    "missing row for ({}, {})",
                    ids[cell / t_n],
                    grid.year(cell % t_n)
                ));
            }
        }
        if self.problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(self.problems))
        }
    }
}

pub fn load_state_panel(path: &Path, geo: &GeoHierarchy, grid: YearGrid) -> Result<StatePanel> {
    let rows: Vec<StateRow> = csvio::read_rows(path)?;
    let t_n = grid.n_years();
    let n = geo.n_states();
    let mut panel = StatePanel {
        grid,
        state_ids: geo.state_ids(),
        counts: vec![None; n * t_n],
        population: vec![0; n * t_n],
        covariates: CovariateTable::new(&STATE_COVARIATES, n, t_n),
    };
    let mut tracker = CellTracker::new(n * t_n);
    for row in rows {
        let Some(s) = geo.state_index(&row.state_id) else {
            tracker.problems.push(format!("unknown state_id `{}`", row.state_id));
            continue;
        };
        let Some(t) = grid.index(row.year) else {
            continue;
        };
        let cell = panel.cell(s, t);
        if !tracker.mark(cell, || format!("({}, {})", row.state_id, row.year)) {
            continue;
        }
        if row.population == 0 {
            tracker.problems.push(format!(
                "population must be positive at ({}, {})",
                row.state_id, row.year
            ));
        }
        panel.counts[cell] = row.count;
        panel.population[cell] = row.population;
        panel.covariates.set(0, s, t, row.pr_misuse.unwrap_or(f64::NAN));
        panel.covariates.set(1, s, t, row.heroin.unwrap_or(f64::NAN));
    }
    tracker.finish(&panel.state_ids, &grid)?;
    Ok(panel)
}

pub fn write_state_panel(path: &Path, panel: &StatePanel) -> Result<()> {
    let mut rows = Vec::new();
    for (s, id) in panel.state_ids.iter().enumerate() {
        for t in 0..panel.grid.n_years() {
            let cov = &panel.covariates;
            rows.push(StateRow {
                state_id: id.clone(),
                year: panel.grid.year(t),
                count: panel.count(s, t),
                population: panel.population(s, t),
                pr_misuse: opt(cov.get(0, s, t)),
                heroin: opt(cov.get(1, s, t)),
            });
        }
    }
    csvio::write_rows(path, &rows)
}

pub fn load_county_panel(path: &Path, geo: &GeoHierarchy, grid: YearGrid) -> Result<CountyPanel> {
    let rows: Vec<CountyRow> = csvio::read_rows(path)?;
    let t_n = grid.n_years();
    let n = geo.n_counties();
    let mut panel = CountyPanel {
        grid,
        county_ids: geo.county_ids(),
        population: vec![0; n * t_n],
        covariates: CovariateTable::new(&COUNTY_COVARIATES, n, t_n),
    };
    let mut tracker = CellTracker::new(n * t_n);
    for row in rows {
        let Some(c) = geo.county_index(&row.county_id) else {
            tracker.problems.push(format!("unknown county_id `{}`", row.county_id));
            continue;
        };
        let Some(t) = grid.index(row.year) else {
            continue;
        };
        let cell = panel.cell(c, t);
        if !tracker.mark(cell, || format!("({}, {})", row.county_id, row.year)) {
            continue;
        }
        if row.population == 0 {
            tracker.problems.push(format!(
                "population must be positive at ({}, {})",
                row.county_id, row.year
            ));
        }
        panel.population[cell] = row.population;
        let values = [
            row.opioid_mortality,
            row.pct_rural,
            row.poverty,
            row.disability,
            row.cum_opioid_rate,
        ];
        for (j, v) in values.into_iter().enumerate() {
            panel.covariates.set(j, c, t, v.unwrap_or(f64::NAN));
        }
    }
    tracker.finish(&panel.county_ids, &grid)?;
    Ok(panel)
}

pub fn write_county_panel(path: &Path, panel: &CountyPanel) -> Result<()> {
    let mut rows = Vec::new();
    let cov = &panel.covariates;
    for (c, id) in panel.county_ids.iter().enumerate() {
        for t in 0..panel.grid.n_years() {
            rows.push(CountyRow {
                county_id: id.clone(),
                year: panel.grid.year(t),
                population: panel.population(c, t),
                opioid_mortality: opt(cov.get(0, c, t)),
                pct_rural: opt(cov.get(1, c, t)),
                poverty: opt(cov.get(2, c, t)),
                disability: opt(cov.get(3, c, t)),
                cum_opioid_rate: opt(cov.get(4, c, t)),
            });
        }
    }
    csvio::write_rows(path, &rows)
}

/// Reads `county_id,year,count`; every county-year of the grid must be present.
pub fn load_county_counts(path: &Path, geo: &GeoHierarchy, grid: YearGrid) -> Result<CountyCounts> {
    let rows: Vec<CountyCountRow> = csvio::read_rows(path)?;
    let t_n = grid.n_years();
    let mut counts = vec![0; geo.n_counties() * t_n];
    let mut tracker = CellTracker::new(counts.len());
    for row in rows {
        let Some(c) = geo.county_index(&row.county_id) else {
            tracker.problems.push(format!("unknown county_id `{}`", row.county_id));
            continue;
        };
        let Some(t) = grid.index(row.year) else {
            continue;
        };
        if tracker.mark(c * t_n + t, || format!("({}, {})", row.county_id, row.year)) {
            counts[c * t_n + t] = row.count;
        }
    }
    tracker.finish(&geo.county_ids(), &grid)?;
    Ok(CountyCounts { n_years: t_n, counts })
}

pub fn write_county_counts(path: &Path, county_ids: &[String], grid: &YearGrid, counts: &CountyCounts) -> Result<()> {
    let rows: Vec<CountyCountRow> = county_ids
        .iter()
        .enumerate()
        .flat_map(|(c, id)| {
            (0..grid.n_years()).map(move |t| CountyCountRow {
                county_id: id.clone(),
                year: grid.year(t),
                count: counts.get(c, t),
            })
        })
        .collect();
    csvio::write_rows(path, &rows)
}

/// Replaces each covariate column by `(x - mean) / sd` using the pooled
/// (all units, all years) sample mean and sample standard deviation.
/// Missing cells stay missing.
pub fn standardize_covariates<P: Panel>(panel: &P) -> Result<P> {
    let mut out = panel.clone();
    let table = out.covariates_mut();
    for (name, column) in table.names.iter().zip(table.columns.iter_mut()) {
        let observed: Vec<f64> = column.iter().copied().filter(|v| v.is_finite()).collect();
        if observed.is_empty() {
            return Err(Error::DegenerateColumn(name.clone()));
        }
        if !observed.iter().any(|&v| v != observed[0]) {
            return Err(Error::DegenerateColumn(name.clone()));
        }
        let mean = crate::stats::mean(&observed);
        let sd = crate::stats::sample_sd(&observed);
        if !(sd > 0.0) {
            return Err(Error::DegenerateColumn(name.clone()));
        }
        for v in column.iter_mut().filter(|v| v.is_finite()) {
            *v = (*v - mean) / sd;
        }
    }
    Ok(out)
}

/// Fills gaps in each unit's covariate series: interior gaps by linear
/// interpolation between the nearest observed years, leading and trailing
/// gaps by linear extrapolation from the two nearest observed years.
pub fn interpolate_missing_covariates<P: Panel>(panel: &P) -> Result<P> {
    let mut out = panel.clone();
    let n_units = out.covariates().n_units;
    let t_n = out.covariates().n_years;
    for j in 0..out.covariates().n_covariates() {
        for unit in 0..n_units {
            let series: Vec<f64> = (0..t_n).map(|t| out.covariates().get(j, unit, t)).collect();
            if series.iter().all(|v| v.is_finite()) {
                continue;
            }
            let observed: Vec<usize> = (0..t_n).filter(|&t| series[t].is_finite()).collect();
            if observed.len() < 2 {
                return Err(Error::InsufficientData {
                    unit: out.unit_id(unit).to_string(),
                    series: out.covariates().names[j].clone(),
                });
            }
            let filled = fill_series(&series, &observed);
            for (t, v) in filled.into_iter().enumerate() {
                out.covariates_mut().set(j, unit, t, v);
            }
        }
    }
    Ok(out)
}

fn fill_series(series: &[f64], observed: &[usize]) -> Vec<f64> {
    let line = |a: usize, b: usize, t: usize| {
        let (ya, yb) = (series[a], series[b]);
        ya + (yb - ya) * (t as f64 - a as f64) / (b as f64 - a as f64)
    };
    let first = observed[0];
    let last = *observed.last().unwrap();
    (0..series.len())
        .map(|t| {
            if series[t].is_finite() {
                series[t]
            } else if t < first {
                line(observed[0], observed[1], t)
            } else if t > last {
                line(observed[observed.len() - 2], last, t)
            } else {
                let hi = observed.partition_point(|&o| o < t);
                line(observed[hi - 1], observed[hi], t)
            }
        })
        .collect()
}

/// Mapping from ids to dense indices, used when reading summary files.
pub(crate) fn id_map(ids: &[String]) -> HashMap<&str, usize> {
    ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect()
}
