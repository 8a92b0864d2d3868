use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use bstep_core::county_model::{read_county_summary, CountyModel, StageTwoData};
use bstep_core::sampler::{self, diagnostics::fraction_above, io as draw_io};
use bstep_core::simulation::{run_simulation_study, SimulationConfig};
use bstep_core::synthetic::{desk_fixture, FixtureSpec};
use bstep_core::{
    compute_ratios, interpolate_missing_covariates, load_county_counts, load_county_panel, load_geography,
    load_state_panel, standardize_covariates, GeoHierarchy, ParamDiagnostics, PosteriorDraws, StageOnePosterior,
    StateModel, YearGrid,
};

use crate::config::{require_files, DrawFormat, Inputs, RunConfig};
use crate::{manifest, svg, CliError, Scope};

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Input(format!("cannot create {}: {e}", dir.display())))
}

fn geography(inputs: &Inputs) -> Result<GeoHierarchy, CliError> {
    require_files([inputs.states.as_path(), &inputs.counties, &inputs.adjacency])?;
    Ok(load_geography(&inputs.states, &inputs.counties, &inputs.adjacency)?)
}

/// Fails the gate when too many monitored quantities have a large R-hat.
fn gate(config: &RunConfig, diags: &[ParamDiagnostics]) -> Result<(), CliError> {
    let frac = fraction_above(diags, config.gate.rhat_threshold);
    if frac > config.gate.max_unconverged {
        Err(CliError::Gate(format!(
            "{:.1}% of monitored quantities have R-hat above {} (allowed {:.1}%)",
            100.0 * frac,
            config.gate.rhat_threshold,
            100.0 * config.gate.max_unconverged
        )))
    } else {
        Ok(())
    }
}

fn save_draws(
    config: &RunConfig,
    stem: &str,
    draws: &PosteriorDraws,
    outputs: &mut Vec<String>,
) -> Result<(), CliError> {
    let name = match config.output.draws {
        DrawFormat::None => return Ok(()),
        DrawFormat::Csv => format!("{stem}.csv"),
        DrawFormat::Binary => format!("{stem}.bin"),
    };
    let path = config.out_dir.join(&name);
    match config.output.draws {
        DrawFormat::Csv => draw_io::write_csv(&path, draws)?,
        _ => draw_io::write_binary(&path, draws)?,
    }
    outputs.push(name);
    Ok(())
}

/// Writes the manifest, then reports the gate outcome.
fn finish(config: &RunConfig, command: &str, outputs: &[String], result: Result<(), CliError>) -> Result<(), CliError> {
    let status = result.as_ref().err().map_or(0, CliError::exit_code);
    manifest::write(&config.out_dir, command, config, outputs, status)?;
    result
}

pub fn fit_state(config: &RunConfig) -> Result<(), CliError> {
    let grid = config.grid()?;
    let inputs = &config.inputs;
    let geo = geography(inputs)?;
    require_files([inputs.state_panel.as_path()])?;
    let raw = load_state_panel(&inputs.state_panel, &geo, grid)?;
    let schedule = compute_ratios(&raw, &grid)?;
    let panel = standardize_covariates(&interpolate_missing_covariates(&raw)?)?;
    let model = StateModel::new(panel, schedule.clone(), config.state_prior)?;

    let out = &config.out_dir;
    create_dir(out)?;
    schedule.write_csv(&out.join("adjustment_schedule.csv"))?;
    let fit = model.fit(&config.mcmc)?;
    fit.posterior.write_dir(out)?;
    draw_io::write_diagnostics(&out.join("diagnostics.csv"), &fit.diagnostics)?;
    let mut outputs: Vec<String> = [
        "adjustment_schedule.csv",
        "stage1_summary.csv",
        "stage1_state_effects.csv",
        "diagnostics.csv",
    ]
    .map(String::from)
    .to_vec();
    save_draws(config, "stage1_draws", &fit.draws, &mut outputs)?;
    eprintln!("state fit written to {}", out.display());
    finish(config, "fit-state", &outputs, gate(config, &fit.diagnostics))
}

pub fn fit_county(config: &RunConfig) -> Result<(), CliError> {
    let grid = config.grid()?;
    let inputs = &config.inputs;
    let geo = geography(inputs)?;
    let stage1_dir = config.stage1_dir();
    require_files([
        inputs.county_panel.as_path(),
        &stage1_dir.join("stage1_summary.csv"),
        &stage1_dir.join("stage1_state_effects.csv"),
    ])?;
    if let Some(p) = &inputs.county_counts {
        require_files([p.as_path()])?;
    }
    let raw = load_county_panel(&inputs.county_panel, &geo, grid)?;
    let panel = standardize_covariates(&interpolate_missing_covariates(&raw)?)?;
    let stage1 = StageOnePosterior::read_dir(&stage1_dir, &geo.state_ids(), grid)?;
    let counts = match &inputs.county_counts {
        Some(p) => Some(load_county_counts(p, &geo, grid)?),
        None => None,
    };
    let data = StageTwoData::new(panel, &geo, &stage1, counts)?;
    let model = CountyModel::new(data, config.county_prior)?;

    let out = &config.out_dir;
    create_dir(out)?;
    // allocation coherence is checked on every draw before anything is written
    let fit = model.fit(&config.mcmc)?;
    fit.posterior.write_dir(out)?;
    draw_io::write_diagnostics(&out.join("stage2_diagnostics.csv"), &fit.diagnostics)?;
    let mut outputs = vec!["stage2_summary.csv".to_string(), "stage2_diagnostics.csv".to_string()];
    save_draws(config, "stage2_draws", &fit.draws, &mut outputs)?;
    eprintln!("county fit written to {}", out.display());
    finish(config, "fit-county", &outputs, gate(config, &fit.diagnostics))
}

pub fn simulate(config: &RunConfig, replicates: Option<usize>) -> Result<(), CliError> {
    let grid = config.grid()?;
    let inputs = &config.inputs;
    let geo = geography(inputs)?;
    require_files([inputs.county_panel.as_path()])?;
    let raw = load_county_panel(&inputs.county_panel, &geo, grid)?;
    let panel = standardize_covariates(&interpolate_missing_covariates(&raw)?)?;
    let sim = SimulationConfig {
        replicates: replicates.unwrap_or(config.simulation.replicates),
        seed: config.mcmc.seed,
        params: config.simulation.params,
        state_mcmc: config.mcmc,
        county_mcmc: config.mcmc,
        state_hyper: config.state_prior,
        county_hyper: config.county_prior,
        rhat_threshold: config.gate.rhat_threshold,
        max_unconverged: config.gate.max_unconverged,
    };
    let report = run_simulation_study(&geo, &panel, &sim)?;
    create_dir(&config.out_dir)?;
    report.write_dir(&config.out_dir)?;
    let outputs = [
        "simulation_report.csv",
        "simulation_report.json",
        "simulation_replicates.csv",
        "simulation_replicates.json",
    ]
    .map(String::from);
    eprintln!(
        "{} replicates ({} flagged); state coverage {:.3}, county coverage {:.3}",
        report.replicates.len(),
        report.n_flagged(),
        report.state.coverage,
        report.county.coverage
    );
    finish(config, "simulate", &outputs, Ok(()))
}

/// Units selected by `ids`, in the order given; all units when empty.
fn select(ids: &[String], valid: &[String]) -> Result<Vec<usize>, CliError> {
    if ids.is_empty() {
        return Ok((0..valid.len()).collect());
    }
    let unknown: Vec<&str> = ids.iter().filter(|i| !valid.contains(i)).map(String::as_str).collect();
    if !unknown.is_empty() {
        return Err(CliError::Input(format!(
            "unknown ids: {}; valid ids: {}",
            unknown.join(", "),
            valid.join(", ")
        )));
    }
    Ok(ids.iter().map(|i| valid.iter().position(|v| v == i).unwrap()).collect())
}

fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Median, lower and upper bound of one cell.
type Band = (f64, f64, f64);

struct Unit {
    id: String,
    median: Vec<f64>,
    lo: Vec<f64>,
    hi: Vec<f64>,
    observed: Vec<Option<f64>>,
}

fn state_units(config: &RunConfig, geo: &GeoHierarchy, grid: YearGrid) -> Result<Vec<Unit>, CliError> {
    let dir = config.stage1_dir();
    require_files([
        dir.join("stage1_summary.csv").as_path(),
        &dir.join("stage1_state_effects.csv"),
    ])?;
    let post = StageOnePosterior::read_dir(&dir, &geo.state_ids(), grid)?;
    let observed = if config.inputs.state_panel.is_file() {
        Some(load_state_panel(&config.inputs.state_panel, geo, grid)?)
    } else {
        None
    };
    let t_n = grid.n_years();
    Ok(post
        .state_ids
        .iter()
        .enumerate()
        .map(|(s, id)| {
            let cells = s * t_n..(s + 1) * t_n;
            Unit {
                id: id.clone(),
                median: post.pi_median[cells.clone()].to_vec(),
                lo: post.pi_lo[cells.clone()].to_vec(),
                hi: post.pi_hi[cells].to_vec(),
                // counts on the original definition, through the fitted adjustment
                observed: (0..t_n)
                    .map(|t| {
                        let p = observed.as_ref()?;
                        let y = p.count(s, t)? as f64;
                        Some(y * post.delta_median[s * t_n + t] / p.population(s, t) as f64)
                    })
                    .collect(),
            }
        })
        .collect())
}

fn county_units(config: &RunConfig, geo: &GeoHierarchy, grid: YearGrid) -> Result<Vec<Unit>, CliError> {
    let path = config.out_dir.join("stage2_summary.csv");
    require_files([path.as_path()])?;
    let rows = read_county_summary(&path)?;
    let t_n = grid.n_years();
    let ids = geo.county_ids();
    let mut by_id: BTreeMap<&str, Vec<Option<Band>>> = ids.iter().map(|id| (id.as_str(), vec![None; t_n])).collect();
    for r in &rows {
        let (Some(series), Some(t)) = (by_id.get_mut(r.county_id.as_str()), grid.index(r.year)) else {
            return Err(CliError::Input(format!(
                "{}: unexpected row ({}, {})",
                path.display(),
                r.county_id,
                r.year
            )));
        };
        series[t] = Some((r.pi_median, r.pi_lo95, r.pi_hi95));
    }
    let observed = match &config.inputs.county_counts {
        Some(p) if p.is_file() => {
            let counts = load_county_counts(p, geo, grid)?;
            let panel = load_county_panel(&config.inputs.county_panel, geo, grid)?;
            Some((counts, panel))
        }
        _ => None,
    };
    ids.iter()
        .enumerate()
        .map(|(c, id)| {
            let series = &by_id[id.as_str()];
            if series.iter().any(Option::is_none) {
                return Err(CliError::Input(format!(
                    "{}: incomplete rows for `{id}`",
                    path.display()
                )));
            }
            let v: Vec<(f64, f64, f64)> = series.iter().flatten().copied().collect();
            Ok(Unit {
                id: id.clone(),
                median: v.iter().map(|x| x.0).collect(),
                lo: v.iter().map(|x| x.1).collect(),
                hi: v.iter().map(|x| x.2).collect(),
                observed: (0..t_n)
                    .map(|t| {
                        observed
                            .as_ref()
                            .map(|(k, p)| k.get(c, t) as f64 / p.population(c, t) as f64)
                    })
                    .collect(),
            })
        })
        .collect()
}

pub fn plot(config: &RunConfig, scope: Scope, ids: &[String]) -> Result<(), CliError> {
    let grid = config.grid()?;
    let geo = geography(&config.inputs)?;
    let units = match scope {
        Scope::State => state_units(config, &geo, grid)?,
        Scope::County => county_units(config, &geo, grid)?,
    };
    let valid: Vec<String> = units.iter().map(|u| u.id.clone()).collect();
    let chosen = select(ids, &valid)?;
    let dir = config.out_dir.join("plots");
    create_dir(&dir)?;
    let years: Vec<i32> = grid.years().collect();
    let prefix = match scope {
        Scope::State => "state",
        Scope::County => "county",
    };
    let mut outputs = Vec::new();
    for u in chosen.into_iter().map(|i| &units[i]) {
        let text = svg::render(
            &svg::Series {
                title: &format!("{} {}", prefix, u.id),
                years: &years,
                median: &u.median,
                lo: &u.lo,
                hi: &u.hi,
                observed: &u.observed,
            },
            config.plot.width,
            config.plot.height,
        );
        let name = format!("plots/{prefix}_{}.svg", file_stem(&u.id));
        let path = config.out_dir.join(&name);
        std::fs::write(&path, text).map_err(|e| CliError::Input(format!("cannot write {}: {e}", path.display())))?;
        outputs.push(name);
    }
    finish(config, "plot", &outputs, Ok(()))
}

pub fn diagnose(config: &RunConfig, draws: &Path) -> Result<(), CliError> {
    require_files([draws])?;
    let d = draw_io::read_any(draws)?;
    let diags = sampler::diagnostics::diagnose(&d)?;
    create_dir(&config.out_dir)?;
    draw_io::write_diagnostics(&config.out_dir.join("diagnostics.csv"), &diags)?;
    let flagged = fraction_above(&diags, config.gate.rhat_threshold);
    eprintln!(
        "{} parameters, {:.1}% with R-hat above {}",
        diags.len(),
        100.0 * flagged,
        config.gate.rhat_threshold
    );
    finish(config, "diagnose", &["diagnostics.csv".to_string()], Ok(()))
}

#[derive(Debug, Clone, clap::Args)]
pub struct SynthArgs {
    /// Directory for the data files and `bstep.toml`.
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 3)]
    pub states: usize,
    #[arg(long, default_value_t = 3)]
    pub rows: usize,
    #[arg(long, default_value_t = 4)]
    pub cols: usize,
    /// Counties of the last state left without neighbors.
    #[arg(long, default_value_t = 0)]
    pub islands: usize,
    /// State counts after this year are left empty.
    #[arg(long)]
    pub last_observed_year: Option<i32>,
}

pub fn synth(args: &SynthArgs) -> Result<(), CliError> {
    let spec = FixtureSpec {
        n_states: args.states,
        rows: args.rows,
        cols: args.cols,
        seed: args.seed,
        islands: args.islands,
        last_observed_year: args.last_observed_year,
        ..FixtureSpec::default()
    };
    let fixture = desk_fixture(&spec)?;
    create_dir(&args.out_dir)?;
    fixture.write_dir(&args.out_dir)?;
    let config = RunConfig {
        grid: Some(spec.grid),
        inputs: Inputs {
            county_counts: Some("county_counts.csv".into()),
            ..Inputs::default()
        },
        ..RunConfig::default()
    };
    let text = toml::to_string(&config).map_err(|e| CliError::Input(format!("cannot encode config: {e}")))?;
    std::fs::write(args.out_dir.join("bstep.toml"), text)
        .map_err(|e| CliError::Input(format!("cannot write config: {e}")))?;
    let outputs = [
        "states.csv",
        "counties.csv",
        "adjacency.csv",
        "state_panel.csv",
        "county_panel.csv",
        "county_counts.csv",
        "bstep.toml",
    ]
    .map(String::from);
    let mut recorded = config.clone();
    recorded.out_dir = args.out_dir.clone();
    recorded.mcmc.seed = args.seed;
    manifest::write(&args.out_dir, "synth", &recorded, &outputs, 0)
}
