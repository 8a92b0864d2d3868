//! Shared setup for the benchmarks: the default synthetic fixture and both
//! models built on it.

use bstep_core::county_model::{CountyModel, StageTwoData};
use bstep_core::synthetic::{desk_fixture, Fixture, FixtureSpec};
use bstep_core::{compute_ratios, interpolate_missing_covariates, standardize_covariates, McmcConfig, StateModel};

pub struct Models {
    pub fixture: Fixture,
    pub state: StateModel,
    pub county: CountyModel,
}

/// Builds both models; the county model sits on a short state fit.
pub fn models() -> Models {
    let fixture = desk_fixture(&FixtureSpec::default()).expect("fixture");
    let raw = &fixture.state_panel_raw;
    let schedule = compute_ratios(raw, &raw.grid).expect("ratios");
    let panel =
        standardize_covariates(&interpolate_missing_covariates(raw).expect("interpolate")).expect("standardize");
    let state = StateModel::new(panel, schedule, Default::default()).expect("state model");
    let short = McmcConfig {
        iterations: 1000,
        burn_in: 500,
        ..McmcConfig::default()
    };
    let stage1 = state.fit(&short).expect("state fit");
    let data = StageTwoData::new(
        fixture.county_panel.clone(),
        &fixture.geo,
        &stage1.posterior,
        Some(fixture.truth.county_counts.clone()),
    )
    .expect("stage two data");
    let county = CountyModel::new(data, Default::default()).expect("county model");
    Models { fixture, state, county }
}
