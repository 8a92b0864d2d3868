//! Two-stage Bayesian top-down estimation of disease risk.
//!
//! Stage one fits a state-level Poisson model with random-walk temporal
//! effects and a correction for a change in case definition. Stage two
//! allocates the state totals to counties through a softmax over county
//! linear predictors carrying BYM spatial and random-walk temporal effects.
//! Both stages are fitted with the adaptive Metropolis-within-Gibbs sampler
//! in [`sampler`]. [`simulation`] generates synthetic truths and scores the
//! full pipeline against them.

// `!(x > 0.0)` guards are meant to reject NaN as well
#![allow(clippy::neg_cmp_op_on_partial_ord)]

/// Version of this library, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub mod adjustment;
pub mod county_model;
mod csvio;
pub mod error;
pub mod geo;
pub mod panel;
pub mod sampler;
pub mod simulation;
pub mod state_model;
pub mod stats;
pub mod synthetic;

pub use adjustment::{compute_ratios, AdjustmentSchedule, RatioSource};
pub use county_model::{CountyHyper, CountyModel, CountyPosterior, StageTwoData, StageTwoParams};
pub use error::{Error, Result};
pub use geo::{build_icar_structure, load_geography, County, GeoHierarchy, NeighborStructure, State};
pub use panel::{
    interpolate_missing_covariates, load_county_counts, load_county_panel, load_state_panel, standardize_covariates,
    CountyCounts, CountyPanel, StatePanel, YearGrid,
};
pub use sampler::diagnostics::{ParamDiagnostics, ParamSummary};
pub use sampler::{Block, McmcConfig, ParamSpace, PosteriorDraws, Transform};
pub use simulation::{SimulationConfig, SimulationReport};
pub use state_model::{StageOneParams, StageOnePosterior, StateHyper, StateModel};
