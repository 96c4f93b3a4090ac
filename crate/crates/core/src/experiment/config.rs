use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ExperimentError;
use crate::deterministic::Discretization;
use crate::grid::TimeGrid;
use crate::kernels::{CoefficientSet, Preset};
use crate::stats::TestFunction;

/// Smallest accepted number of Monte Carlo paths.
pub const MIN_PATHS: usize = 100;

fn one() -> f64 {
    1.0
}
fn default_steps() -> usize {
    256
}
fn default_paths() -> usize {
    10_000
}
fn default_epsilons() -> Vec<f64> {
    vec![0.4, 0.2, 0.1, 0.05]
}
fn default_test_functions() -> Vec<String> {
    vec!["cos".into(), "tanh".into()]
}
fn default_hurst_values() -> Vec<f64> {
    vec![0.3, 0.5, 0.7, 0.9]
}
fn default_kernel_times() -> Vec<f64> {
    vec![0.25, 0.5, 1.0]
}
fn default_pairs() -> Vec<[f64; 2]> {
    vec![[0.5, 0.25], [0.5, 0.5], [0.75, 0.5], [1.0, 0.25], [1.0, 0.5], [1.0, 1.0]]
}

/// Experiment description, read from a JSON document. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: String,
    /// Preset parameters; missing trailing entries take their defaults.
    #[serde(default)]
    pub params: Vec<f64>,
    #[serde(default = "one")]
    pub x0: f64,
    #[serde(default = "one")]
    pub horizon: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_paths")]
    pub paths: usize,
    #[serde(default)]
    pub seed: u64,
    /// Strictly decreasing values in `(0, 1)`.
    #[serde(default = "default_epsilons")]
    pub epsilons: Vec<f64>,
    /// Hurst index; required for the fBm presets, forbidden otherwise.
    #[serde(default)]
    pub hurst: Option<f64>,
    /// Grid-aligned times in `[T/4, T]`; defaults to `[T/2, T]`.
    #[serde(default)]
    pub observation_times: Option<Vec<f64>>,
    #[serde(default = "default_test_functions")]
    pub test_functions: Vec<String>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Hurst indices scanned by `kernel-check`.
    #[serde(default = "default_hurst_values")]
    pub hurst_values: Vec<f64>,
    /// Times at which `kernel-check` compares the kernel's L² mass with `t^{2H}`.
    #[serde(default = "default_kernel_times")]
    pub kernel_times: Vec<f64>,
    /// `(t, s)` pairs at which `kernel-check` compares the fBm covariance.
    #[serde(default = "default_pairs")]
    pub covariance_pairs: Vec<[f64; 2]>,
}

fn field(name: &str, msg: impl std::fmt::Display) -> ExperimentError {
    ExperimentError::Config(format!("field `{name}`: {msg}"))
}

impl ExperimentConfig {
    /// A config with every optional field at its default.
    pub fn new(preset: &str) -> Self {
        serde_json::from_value(serde_json::json!({ "preset": preset })).expect("defaults deserialize")
    }

    pub fn from_json(text: &str) -> Result<Self, ExperimentError> {
        serde_json::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))
    }

    pub fn from_path(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ExperimentError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Checks every field and fills in derived defaults.
    pub fn resolve(&self) -> Result<Resolved, ExperimentError> {
        let preset = Preset::from_name(&self.preset).ok_or_else(|| {
            let names: Vec<&str> = Preset::ALL.iter().map(|p| p.name()).collect();
            field("preset", format!("unknown preset {:?}; expected one of {}", self.preset, names.join(", ")))
        })?;
        if !self.x0.is_finite() {
            return Err(field("x0", "must be finite"));
        }
        let grid = TimeGrid::new(self.horizon, self.steps).map_err(|e| {
            let name = if self.horizon > 0.0 && self.horizon.is_finite() { "steps" } else { "horizon" };
            field(name, e)
        })?;
        if self.paths < MIN_PATHS {
            return Err(field("paths", format!("need at least {MIN_PATHS}, got {}", self.paths)));
        }
        if self.epsilons.is_empty() {
            return Err(field("epsilons", "must not be empty"));
        }
        if let Some(e) = self.epsilons.iter().find(|&&e| !(e > 0.0 && e < 1.0)) {
            return Err(field("epsilons", format!("{e} is outside (0, 1)")));
        }
        if self.epsilons.windows(2).any(|w| w[1] >= w[0]) {
            return Err(field("epsilons", "must be strictly decreasing"));
        }
        match (preset.is_fbm(), self.hurst) {
            (true, None) => return Err(field("hurst", format!("required for preset {preset}"))),
            (false, Some(_)) => return Err(field("hurst", format!("not allowed for preset {preset}"))),
            (true, Some(h)) if !(h > 0.0 && h < 1.0) => return Err(field("hurst", format!("{h} is outside (0, 1)"))),
            _ => {}
        }
        let coefficients = CoefficientSet::preset(preset, &self.params, self.hurst).map_err(|e| field("params", e))?;

        let times = self.observation_times.clone().unwrap_or_else(|| vec![self.horizon / 2.0, self.horizon]);
        if times.is_empty() {
            return Err(field("observation_times", "must not be empty"));
        }
        let mut observation_nodes = Vec::with_capacity(times.len());
        for &t in &times {
            let j = grid
                .index_of(t)
                .ok_or_else(|| field("observation_times", format!("{t} is not a grid node")))?;
            if t < self.horizon / 4.0 {
                return Err(field("observation_times", format!("{t} is below T/4")));
            }
            if observation_nodes.contains(&j) {
                return Err(field("observation_times", format!("{t} is repeated")));
            }
            observation_nodes.push(j);
        }

        let test_functions = self
            .test_functions
            .iter()
            .map(|s| s.parse::<TestFunction>().map_err(|e| field("test_functions", e)))
            .collect::<Result<Vec<_>, _>>()?;
        if test_functions.is_empty() {
            return Err(field("test_functions", "must not be empty"));
        }
        if let Some(h) = self.hurst_values.iter().find(|&&h| !(h > 0.0 && h < 1.0)) {
            return Err(field("hurst_values", format!("{h} is outside (0, 1)")));
        }
        if let Some(t) = self.kernel_times.iter().find(|&&t| !(t > 0.0 && t.is_finite())) {
            return Err(field("kernel_times", format!("{t} is not positive")));
        }
        let mut pair_nodes = Vec::with_capacity(self.covariance_pairs.len());
        for &[t, s] in &self.covariance_pairs {
            let (Some(jt), Some(js)) = (grid.index_of(t), grid.index_of(s)) else {
                return Err(field("covariance_pairs", format!("({t}, {s}) is not on the grid")));
            };
            if js == 0 || jt == 0 {
                return Err(field("covariance_pairs", format!("({t}, {s}) must be positive times")));
            }
            pair_nodes.push((jt, js));
        }

        let mut config = self.clone();
        config.observation_times = Some(times);
        Ok(Resolved { config, preset, coefficients, grid, observation_nodes, test_functions, pair_nodes })
    }
}

/// A validated config.
#[derive(Debug, Clone)]
pub struct Resolved {
    /// The input with derived defaults filled in, as echoed in the manifest.
    pub config: ExperimentConfig,
    pub preset: Preset,
    pub coefficients: CoefficientSet,
    pub grid: TimeGrid,
    pub observation_nodes: Vec<usize>,
    pub test_functions: Vec<TestFunction>,
    pub pair_nodes: Vec<(usize, usize)>,
}

impl Resolved {
    pub fn discretization(&self) -> Result<Discretization, ExperimentError> {
        Ok(Discretization::new(self.coefficients.clone(), self.grid)?)
    }
}
