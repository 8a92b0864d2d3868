//! Lower bounds `r` for the definition-change adjustment factors.
//!
//! For years up to the anchor year the ratio is fixed at one. After it, the
//! ratio is the anchor-year count divided by the year's count where both are
//! observed, linearly interpolated between defined years where the count is
//! missing, and held flat after the last defined year. Ratios above one are
//! clamped to one so the `Uniform(r, 1)` prior stays proper.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::csvio;
use crate::error::{Error, Result};
use crate::panel::{StatePanel, YearGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatioSource {
    FixedOne,
    ObservedRatio,
    Interpolated,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdjustmentSchedule {
    pub grid: YearGrid,
    pub state_ids: Vec<String>,
    /// Dense `state * n_years + year` layout.
    pub ratio: Vec<f64>,
    pub source: Vec<RatioSource>,
}

impl AdjustmentSchedule {
    /// A schedule with `r = 1` everywhere, i.e. no adjustment at all.
    pub fn none(grid: YearGrid, state_ids: Vec<String>) -> Self {
        let n = state_ids.len() * grid.n_years();
        Self {
            grid,
            state_ids,
            ratio: vec![1.0; n],
            source: vec![RatioSource::FixedOne; n],
        }
    }

    pub fn r(&self, s: usize, t: usize) -> f64 {
        self.ratio[s * self.grid.n_years() + t]
    }

    pub fn source(&self, s: usize, t: usize) -> RatioSource {
        self.source[s * self.grid.n_years() + t]
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Row<'a> {
            state_id: &'a str,
            year: i32,
            r: f64,
            source: RatioSource,
        }
        let t_n = self.grid.n_years();
        let rows: Vec<Row> = self
            .state_ids
            .iter()
            .enumerate()
            .flat_map(|(s, id)| {
                (0..t_n).map(move |t| Row {
                    state_id: id,
                    year: self.grid.year(t),
                    r: self.r(s, t),
                    source: self.source(s, t),
                })
            })
            .collect();
        csvio::write_rows(path, &rows)
    }
}

pub fn compute_ratios(panel: &StatePanel, grid: &YearGrid) -> Result<AdjustmentSchedule> {
    let t_n = grid.n_years();
    let anchor = grid.anchor_index();

    let missing: Vec<String> = (0..panel.n_states())
        .filter(|&s| panel.count(s, anchor).is_none())
        .map(|s| panel.state_ids[s].clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::AnchorMissing {
            year: grid.anchor_year,
            states: missing,
        });
    }

    let mut ratio = Vec::with_capacity(panel.n_states() * t_n);
    let mut source = Vec::with_capacity(panel.n_states() * t_n);
    for s in 0..panel.n_states() {
        let base = panel.count(s, anchor).unwrap_or_default();
        if base == 0 {
            return Err(Error::Domain(format!(
                "anchor-year count is zero for state `{}`",
                panel.state_ids[s]
            )));
        }
        let mut r: Vec<Option<f64>> = vec![None; t_n];
        let mut src = vec![RatioSource::Interpolated; t_n];
        for t in 0..t_n {
            if t <= anchor {
                r[t] = Some(1.0);
                src[t] = RatioSource::FixedOne;
            } else if let Some(y) = panel.count(s, t) {
                if y == 0 {
                    return Err(Error::ZeroCount {
                        state: panel.state_ids[s].clone(),
                        year: grid.year(t),
                    });
                }
                r[t] = Some((base as f64 / y as f64).min(1.0));
                src[t] = RatioSource::ObservedRatio;
            }
        }
        ratio.extend(fill_ratio_gaps(&r));
        source.extend(src);
    }

    Ok(AdjustmentSchedule {
        grid: *grid,
        state_ids: panel.state_ids.clone(),
        ratio,
        source,
    })
}

/// Linear interpolation between defined entries, flat after the last one.
/// The first entry is always defined (years up to the anchor are fixed).
fn fill_ratio_gaps(r: &[Option<f64>]) -> Vec<f64> {
    let defined: Vec<usize> = (0..r.len()).filter(|&t| r[t].is_some()).collect();
    (0..r.len())
        .map(|t| {
            if let Some(v) = r[t] {
                return v;
            }
            let hi = defined.partition_point(|&d| d < t);
            let lo = defined[hi - 1];
            match defined.get(hi) {
                Some(&hi) => {
                    let (a, b) = (r[lo].unwrap(), r[hi].unwrap());
                    a + (b - a) * (t - lo) as f64 / (hi - lo) as f64
                }
                None => r[lo].unwrap(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::{CovariateTable, STATE_COVARIATES};

    fn panel(counts: Vec<Option<u64>>, grid: YearGrid) -> StatePanel {
        let t_n = grid.n_years();
        assert_eq!(counts.len(), t_n);
        StatePanel {
            grid,
            state_ids: vec!["S1".into()],
            counts,
            population: vec![10_000; t_n],
            covariates: CovariateTable::new(&STATE_COVARIATES, 1, t_n),
        }
    }

    fn grid() -> YearGrid {
        YearGrid::new(2014, 2023, 2015, 2016, 2020).unwrap()
    }

    #[test]
    fn direct_quotient() {
        let mut c = vec![None; 10];
        c[2] = Some(100);
        c[7] = Some(250);
        let sched = compute_ratios(&panel(c, grid()), &grid()).unwrap();
        assert_eq!(sched.r(0, 7), 0.4);
        assert_eq!(sched.source(0, 7), RatioSource::ObservedRatio);
    }

    #[test]
    fn interpolates_between_anchor_and_observed() {
        let mut c = vec![None; 10];
        c[2] = Some(100);
        c[7] = Some(250);
        let sched = compute_ratios(&panel(c, grid()), &grid()).unwrap();
        let want = [0.88, 0.76, 0.64, 0.52];
        for (k, w) in want.iter().enumerate() {
            assert!((sched.r(0, 3 + k) - w).abs() < 1e-12);
            assert_eq!(sched.source(0, 3 + k), RatioSource::Interpolated);
        }
        // flat after the last defined year
        assert_eq!(sched.r(0, 8), 0.4);
        assert_eq!(sched.r(0, 9), 0.4);
    }

    #[test]
    fn pre_anchor_is_fixed_one() {
        let mut c = vec![None; 10];
        c[2] = Some(100);
        let sched = compute_ratios(&panel(c, grid()), &grid()).unwrap();
        assert_eq!(sched.r(0, 0), 1.0);
        assert_eq!(sched.source(0, 0), RatioSource::FixedOne);
        assert_eq!(sched.r(0, 2), 1.0);
    }

    #[test]
    fn ratio_above_one_is_clamped() {
        let mut c = vec![None; 10];
        c[2] = Some(100);
        c[4] = Some(80);
        let sched = compute_ratios(&panel(c, grid()), &grid()).unwrap();
        assert_eq!(sched.r(0, 4), 1.0);
    }

    #[test]
    fn anchor_missing() {
        let c = vec![Some(5); 10]
            .into_iter()
            .enumerate()
            .map(|(t, v)| if t == 2 { None } else { v })
            .collect();
        let err = compute_ratios(&panel(c, grid()), &grid()).unwrap_err();
        assert!(matches!(err, Error::AnchorMissing { year: 2016, .. }));
    }

    #[test]
    fn zero_post_anchor_count() {
        let mut c = vec![None; 10];
        c[2] = Some(100);
        c[5] = Some(0);
        assert!(matches!(
            compute_ratios(&panel(c, grid()), &grid()),
            Err(Error::ZeroCount { year: 2019, .. })
        ));
    }
}
