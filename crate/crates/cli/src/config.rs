//! Run configuration: a TOML file layered over defaults, then flag overrides.

use std::path::{Path, PathBuf};

use bstep_core::county_model::CountyHyper;
use bstep_core::simulation::SimulationParams;
use bstep_core::{McmcConfig, StateHyper, YearGrid};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    pub inputs: Inputs,
    pub grid: Option<YearGrid>,
    pub state_prior: StateHyper,
    pub county_prior: CountyHyper,
    pub mcmc: McmcConfig,
    pub gate: Gate,
    pub simulation: SimulationSection,
    pub plot: PlotOptions,
    pub output: OutputOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("out"),
            inputs: Inputs::default(),
            grid: None,
            state_prior: StateHyper::default(),
            county_prior: CountyHyper::default(),
            mcmc: McmcConfig::default(),
            gate: Gate::default(),
            simulation: SimulationSection::default(),
            plot: PlotOptions::default(),
            output: OutputOptions::default(),
        }
    }
}

/// Input files. Relative paths are taken from the config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Inputs {
    pub states: PathBuf,
    pub counties: PathBuf,
    pub adjacency: PathBuf,
    pub state_panel: PathBuf,
    pub county_panel: PathBuf,
    /// Observed county counts; when absent the county likelihood is dropped.
    pub county_counts: Option<PathBuf>,
    /// Where the county fit finds the state fit's output; defaults to `out_dir`.
    pub stage1_dir: Option<PathBuf>,
}

impl Default for Inputs {
    fn default() -> Self {
        Self {
            states: "states.csv".into(),
            counties: "counties.csv".into(),
            adjacency: "adjacency.csv".into(),
            state_panel: "state_panel.csv".into(),
            county_panel: "county_panel.csv".into(),
            county_counts: None,
            stage1_dir: None,
        }
    }
}

/// A fit fails the gate when more than `max_unconverged` of its monitored
/// quantities have R-hat above `rhat_threshold`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Gate {
    pub rhat_threshold: f64,
    pub max_unconverged: f64,
}

impl Default for Gate {
    fn default() -> Self {
        Self {
            rhat_threshold: 1.1,
            max_unconverged: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationSection {
    pub replicates: usize,
    pub params: SimulationParams,
}

impl Default for SimulationSection {
    fn default() -> Self {
        Self {
            replicates: 20,
            params: SimulationParams::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlotOptions {
    pub width: u32,
    pub height: u32,
}

impl Default for PlotOptions {
    fn default() -> Self {
        Self {
            width: 640,
            height: 400,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DrawFormat {
    #[default]
    None,
    Csv,
    Binary,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputOptions {
    /// Also store the raw posterior draws of each fit.
    pub draws: DrawFormat,
}

/// Flag values that take precedence over the file.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct Overrides {
    /// Directory for every output of the run.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Master random seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub chains: Option<usize>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub burn_in: Option<usize>,
    #[arg(long)]
    pub thin: Option<usize>,
}

impl RunConfig {
    /// Defaults, then the file (if any), then the overrides. Relative input
    /// paths are resolved against the file's directory; a relative `out_dir`
    /// given in the file is too, one given as a flag is left as is.
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self, CliError> {
        let mut config = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Input(format!("cannot read config {}: {e}", p.display())))?;
                let mut c: RunConfig = toml::from_str(&text)
                    .map_err(|e| CliError::Input(format!("invalid config {}: {e}", p.display())))?;
                let base = p.parent().unwrap_or(Path::new(""));
                c.resolve(base);
                c
            }
            None => RunConfig::default(),
        };
        config.apply(overrides);
        config.validate()?;
        Ok(config)
    }

    fn resolve(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let i = &mut self.inputs;
        for p in [
            &mut i.states,
            &mut i.counties,
            &mut i.adjacency,
            &mut i.state_panel,
            &mut i.county_panel,
        ] {
            join(p);
        }
        for p in [&mut i.county_counts, &mut i.stage1_dir].into_iter().flatten() {
            join(p);
        }
        join(&mut self.out_dir);
    }

    fn apply(&mut self, o: &Overrides) {
        if let Some(d) = &o.out_dir {
            self.out_dir = d.clone();
        }
        let m = &mut self.mcmc;
        m.seed = o.seed.unwrap_or(m.seed);
        m.chains = o.chains.unwrap_or(m.chains);
        m.iterations = o.iterations.unwrap_or(m.iterations);
        m.burn_in = o.burn_in.unwrap_or(m.burn_in);
        m.thin = o.thin.unwrap_or(m.thin);
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.mcmc.validate().map_err(CliError::from)?;
        if let Some(g) = &self.grid {
            g.validate().map_err(CliError::from)?;
        }
        let g = self.gate;
        if g.rhat_threshold.is_nan() || g.rhat_threshold < 1.0 || !(0.0..=1.0).contains(&g.max_unconverged) {
            return Err(CliError::Input(
                "gate needs rhat_threshold >= 1 and max_unconverged in [0, 1]".into(),
            ));
        }
        if self.plot.width < 100 || self.plot.height < 100 {
            return Err(CliError::Input("plot width and height must be at least 100".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<YearGrid, CliError> {
        self.grid
            .ok_or_else(|| CliError::Input("config has no [grid] section".into()))
    }

    pub fn stage1_dir(&self) -> PathBuf {
        self.inputs.stage1_dir.clone().unwrap_or_else(|| self.out_dir.clone())
    }

    /// SHA-256 of the effective configuration, as hex.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let text = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(text.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// Fails with an input error unless every path exists.
pub fn require_files<'a>(paths: impl IntoIterator<Item = &'a Path>) -> Result<(), CliError> {
    let missing: Vec<String> = paths
        .into_iter()
        .filter(|p| !p.is_file())
        .map(|p| p.display().to_string())
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(CliError::Input(format!("missing input files: {}", missing.join(", "))))
    }
}
