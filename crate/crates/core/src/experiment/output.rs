use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{Check, ExperimentConfig, ExperimentError};

/// Formats a float with 17 significant digits; non-finite values as `NaN`/`inf`.
pub fn fmt_f(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else {
        format!("{x}")
    }
}

/// Writes CSV files into one output directory and remembers their names.
pub struct OutputDir {
    root: PathBuf,
    files: Vec<String>,
}

fn io(path: &Path, source: std::io::Error) -> ExperimentError {
    ExperimentError::Io { path: path.to_path_buf(), source }
}

impl OutputDir {
    pub fn create(root: &Path) -> Result<Self, ExperimentError> {
        fs::create_dir_all(root).map_err(|e| io(root, e))?;
        Ok(Self { root: root.to_path_buf(), files: Vec::new() })
    }

    pub fn csv(&mut self, name: &str, header: &[&str], rows: Vec<Vec<String>>) -> Result<(), ExperimentError> {
        let path = self.root.join(name);
        let mut w = csv::Writer::from_path(&path).map_err(|e| io(&path, e.into()))?;
        w.write_record(header).map_err(|e| io(&path, e.into()))?;
        for row in rows {
            w.write_record(&row).map_err(|e| io(&path, e.into()))?;
        }
        w.flush().map_err(|e| io(&path, e))?;
        self.files.push(name.to_string());
        Ok(())
    }

    pub fn checks(&mut self, checks: &[Check]) -> Result<(), ExperimentError> {
        let rows = checks
            .iter()
            .map(|c| vec![c.name.clone(), fmt_f(c.value), c.bound.clone(), c.passed.to_string()])
            .collect();
        self.csv("checks.csv", &["check", "value", "bound", "passed"], rows)
    }

    /// Writes `manifest.json`: command, resolved config, artifact version and file list.
    pub fn manifest(mut self, command: &str, config: &ExperimentConfig) -> Result<Vec<String>, ExperimentError> {
        #[derive(Serialize)]
        struct Manifest<'a> {
            artifact: &'static str,
            version: &'static str,
            command: &'a str,
            config: &'a ExperimentConfig,
            files: &'a [String],
        }
        let path = self.root.join("manifest.json");
        let m = Manifest {
            artifact: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command,
            config,
            files: &self.files,
        };
        let mut text = serde_json::to_string_pretty(&m).expect("manifest serializes");
        text.push('\n');
        fs::write(&path, text).map_err(|e| io(&path, e))?;
        self.files.push("manifest.json".into());
        Ok(self.files)
    }
}
