//! The sampler-facing densities against the reference log posteriors, and
//! invariants of the allocation and the state likelihood.

use approx::assert_relative_eq;
use bstep_core::county_model::{population_log_offset, softmax_allocation, stage2_log_posterior, StageTwoParams};
use bstep_core::sampler::{stream_rng, LogDensity};
use bstep_core::state_model::{stage1_log_posterior, state_log_likelihood, StageOneParams};
use bstep_core::synthetic::{desk_fixture, Fixture, FixtureSpec};
use bstep_core::{
    compute_ratios, interpolate_missing_covariates, standardize_covariates, CountyHyper, CountyModel, StageTwoData,
    StateHyper, StateModel,
};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn fixture() -> Fixture {
    desk_fixture(&FixtureSpec {
        n_states: 2,
        rows: 2,
        cols: 3,
        last_observed_year: Some(2020),
        ..FixtureSpec::default()
    })
    .unwrap()
}

fn state_model(f: &Fixture) -> StateModel {
    let schedule = compute_ratios(&f.state_panel_raw, &f.spec.grid).unwrap();
    let panel = standardize_covariates(&interpolate_missing_covariates(&f.state_panel_raw).unwrap()).unwrap();
    StateModel::new(panel, schedule, StateHyper::default()).unwrap()
}

fn gauss(rng: &mut impl Rng, sd: f64) -> f64 {
    sd * rng.sample::<f64, _>(StandardNormal)
}

fn random_stage_one(model: &StateModel, rng: &mut impl Rng) -> StageOneParams {
    let (n_s, t_n) = (model.layout.n_states, model.layout.n_years);
    let grid = model.panel.grid;
    let mut p = StageOneParams::zeros(n_s, t_n);
    p.alpha = 0.005f64.ln() + gauss(rng, 0.3);
    p.beta = [gauss(rng, 0.2), gauss(rng, 0.2)];
    p.omega = (0..n_s).map(|_| gauss(rng, 0.3)).collect();
    p.phi = (0..n_s * t_n).map(|_| gauss(rng, 0.2)).collect();
    p.tau_phi = rng.random_range(1.0..400.0);
    for s in 0..n_s {
        for t in grid.anchor_index() + 1..t_n {
            let r = model.schedule.r(s, t);
            if r < 1.0 {
                p.delta[s * t_n + t] = rng.random_range(r..1.0);
            }
        }
    }
    p
}

#[test]
fn state_sampler_density_differs_from_reference_by_a_constant() {
    let f = fixture();
    let model = state_model(&f);
    let hyper = StateHyper::default();
    let mut rng = stream_rng(5, 0);
    let mut offsets = Vec::new();
    for _ in 0..20 {
        let p = random_stage_one(&model, &mut rng);
        let reference = stage1_log_posterior(&p, &model.panel, &model.schedule, &hyper).unwrap();
        offsets.push(model.log_density(&model.layout.pack(&p)) - reference);
    }
    for o in &offsets {
        assert_relative_eq!(*o, offsets[0], epsilon = 1e-8);
    }
}

fn county_model(f: &Fixture, rng: &mut impl Rng) -> CountyModel {
    let n_s = f.geo.n_states();
    let t_n = f.spec.grid.n_years();
    let data = StageTwoData {
        panel: f.county_panel.clone(),
        state_ids: f.geo.state_ids(),
        state_of: (0..f.geo.n_counties()).map(|c| f.geo.state_of(c)).collect(),
        counties_in: (0..n_s).map(|s| f.geo.counties_in(s).to_vec()).collect(),
        structure: bstep_core::build_icar_structure(&f.geo),
        y_tilde: f
            .truth
            .state_counts
            .iter()
            .map(|&y| y as f64 * rng.random_range(0.9..1.1))
            .collect(),
        omega_tilde: (0..n_s).map(|_| gauss(rng, 0.3)).collect(),
        omega_sd: (0..n_s).map(|_| rng.random_range(0.05..0.5)).collect(),
        counts: Some(f.truth.county_counts.clone()),
    };
    assert_eq!(data.y_tilde.len(), n_s * t_n);
    CountyModel::new(data, CountyHyper::default()).unwrap()
}

#[test]
fn county_sampler_density_differs_from_reference_by_a_constant() {
    let f = fixture();
    let mut rng = stream_rng(6, 0);
    let model = county_model(&f, &mut rng);
    let d = &model.data;
    let (n_s, n_c, t_n) = (d.n_states(), d.n_counties(), d.n_years());
    let hyper = CountyHyper::default();
    let mut offsets = Vec::new();
    for _ in 0..20 {
        let mut p = StageTwoParams::zeros(n_s, n_c, t_n);
        p.alpha = gauss(&mut rng, 0.5);
        p.beta = std::array::from_fn(|_| gauss(&mut rng, 0.3));
        p.gamma = (0..n_s)
            .map(|s| d.omega_tilde[s] + gauss(&mut rng, d.omega_sd[s]))
            .collect();
        p.u_str = (0..n_c).map(|_| gauss(&mut rng, 0.3)).collect();
        p.u_unstr = (0..n_c).map(|_| gauss(&mut rng, 0.3)).collect();
        p.delta = (0..n_c * t_n).map(|_| gauss(&mut rng, 0.2)).collect();
        p.tau_u = rng.random_range(0.5..100.0);
        p.tau_v = rng.random_range(0.5..100.0);
        p.tau_delta = rng.random_range(0.5..100.0);
        let reference = stage2_log_posterior(&p, d, &hyper).unwrap();
        let x = model.layout.pack(&p);
        let fast = model.log_density(&x);
        let by_terms: f64 = (0..model.n_terms()).map(|k| model.term(k, &x)).sum();
        assert_relative_eq!(fast, by_terms, epsilon = 1e-8);
        offsets.push(fast - reference);
    }
    for o in &offsets {
        assert_relative_eq!(*o, offsets[0], epsilon = 1e-8);
    }
}

#[test]
fn reference_density_has_no_hidden_state() {
    let f = fixture();
    let model = state_model(&f);
    let hyper = StateHyper::default();
    let mut rng = stream_rng(7, 0);
    let a = random_stage_one(&model, &mut rng);
    let b = random_stage_one(&model, &mut rng);
    let eval = |p: &StageOneParams| stage1_log_posterior(p, &model.panel, &model.schedule, &hyper).unwrap();
    let (first, _, again) = (eval(&a), eval(&b), eval(&a));
    assert_eq!(first, again);
}

#[test]
fn smaller_adjustment_raises_the_mean() {
    let f = fixture();
    let model = state_model(&f);
    let mut rng = stream_rng(8, 0);
    let mut p = random_stage_one(&model, &mut rng);
    let t_n = model.layout.n_years;
    let cell = t_n - 2;
    let r = model.schedule.r(0, t_n - 2);
    assert!(r < 1.0 && model.panel.counts[cell].is_some());
    let y = model.panel.counts[cell].unwrap() as f64;
    let n = model.panel.population[cell] as f64;
    let ll = |p: &StageOneParams| state_log_likelihood(p, &model.panel, &model.schedule).unwrap();
    p.delta[cell] = 1.0;
    let base = ll(&p);
    let mut prev = base;
    for delta in [0.95, 0.9, 0.85] {
        if delta < r {
            break;
        }
        let eta = bstep_core::state_model::state_linear_predictor(&p, &model.panel, 0, t_n - 2);
        let mean_before = n * eta.exp() / p.delta[cell];
        p.delta[cell] = delta;
        let mean_after = n * eta.exp() / delta;
        let now = ll(&p);
        let expected = y * (mean_after / mean_before).ln() - (mean_after - mean_before);
        assert_relative_eq!(now - prev, expected, epsilon = 1e-8);
        if y < mean_before {
            assert!(now < prev);
        }
        prev = now;
    }
}

proptest! {
    #[test]
    fn zero_effects_allocate_by_population(pops in prop::collection::vec(1u32..10_000_000, 1..40), y in 1.0f64..1e5) {
        let pops: Vec<f64> = pops.into_iter().map(f64::from).collect();
        let offsets = population_log_offset(&pops, y).unwrap();
        let rho = softmax_allocation(&offsets).unwrap();
        let total: f64 = pops.iter().sum();
        for (r, n) in rho.iter().zip(&pops) {
            prop_assert!((r - n / total).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_is_shift_invariant_and_sums_to_one(
        eta in prop::collection::vec(-30.0f64..30.0, 1..50),
        shift in -500.0f64..500.0,
    ) {
        let a = softmax_allocation(&eta).unwrap();
        let shifted: Vec<f64> = eta.iter().map(|e| e + shift).collect();
        let b = softmax_allocation(&shifted).unwrap();
        prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }
}
