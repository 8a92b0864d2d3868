use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by ingestion, model evaluation and sampling.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: line {line}: {message}")]
    Parse { path: PathBuf, line: u64, message: String },

    #[error("validation failed: {}", .0.join("; "))]
    Validation(Vec<String>),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("covariate column `{0}` is degenerate (zero standard deviation)")]
    DegenerateColumn(String),

    #[error("unit `{unit}` has fewer than two observed years for `{series}`")]
    InsufficientData { unit: String, series: String },

    #[error("anchor-year {year} count missing for states: {}", .states.join(", "))]
    AnchorMissing { year: i32, states: Vec<String> },

    #[error("observed count is zero for state `{state}` in {year}; ratio undefined")]
    ZeroCount { state: String, year: i32 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("non-finite value evaluating {0}")]
    NonFinite(String),

    #[error("degenerate interval: lower bound {0} is not below 1")]
    DegenerateInterval(f64),

    #[error("degenerate anchor: standard deviation is zero")]
    DegenerateAnchor,

    #[error("softmax is degenerate: every input is -inf")]
    DegenerateSoftmax,

    #[error("empty input: {0}")]
    Empty(String),

    #[error("count vector sums to {got}, expected {expected}")]
    CountSumMismatch { expected: u64, got: u64 },

    #[error("sampler initialization failed for chain {chain}: log target is {value} at the initial point")]
    Initialization { chain: usize, value: f64 },

    #[error("log target returned NaN in chain {chain} at iteration {iteration}, block `{block}`; state: {state}")]
    NanTarget {
        chain: usize,
        iteration: usize,
        block: String,
        state: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("simulation error: {0}")]
    Generation(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
