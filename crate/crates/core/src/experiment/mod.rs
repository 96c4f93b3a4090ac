//! Config-driven experiments behind the `vf` command line.
//!
//! Each runner validates an [`ExperimentConfig`], performs the solves and
//! simulations, writes CSV files plus `checks.csv` and `manifest.json` into
//! the output directory, and returns the acceptance checks it evaluated.

mod config;
mod output;
mod runners;

use std::path::PathBuf;

use thiserror::Error;

pub use config::{ExperimentConfig, Resolved, MIN_PATHS};
pub use output::fmt_f;
pub use runners::{run_kernel_check, run_limit, run_rate_scan, run_thm2};

use crate::error::Error;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Numerical(Error),

    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl From<Error> for ExperimentError {
    fn from(e: Error) -> Self {
        match e {
            Error::Domain(msg) => ExperimentError::Config(msg),
            other => ExperimentError::Numerical(other),
        }
    }
}

impl ExperimentError {
    /// Process exit status: 2 for config errors, 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Config(_) => 2,
            ExperimentError::Numerical(_) => 3,
            ExperimentError::Io { .. } => 1,
        }
    }
}

/// Exit status when `--assert` is given and a check fails.
pub const EXIT_ASSERT: i32 = 4;

/// One acceptance check evaluated by a runner.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub value: f64,
    /// Human-readable pass condition, e.g. `"<= 1e-3"`.
    pub bound: String,
    pub passed: bool,
}

impl Check {
    pub fn new(name: impl Into<String>, value: f64, bound: impl Into<String>, passed: bool) -> Self {
        Self { name: name.into(), value, bound: bound.into(), passed }
    }
}

/// What a runner produced.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub files: Vec<String>,
    pub checks: Vec<Check>,
}

impl RunSummary {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}
