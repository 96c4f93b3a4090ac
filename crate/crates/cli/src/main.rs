use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use voltfluct::experiment::{
    run_kernel_check, run_limit, run_rate_scan, run_thm2, ExperimentConfig, ExperimentError, RunSummary, EXIT_ASSERT,
};

/// Small-noise stochastic Volterra experiments.
#[derive(Parser)]
#[command(name = "vf", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Deterministic limit and variance of the Gaussian limit.
    Limit(Common),
    /// Strong and distributional convergence rates over the ε-sweep.
    RateScan(Common),
    /// Both sides of the first-order weak expansion.
    Thm2(Common),
    /// fBm kernel mass, covariance and variance lower bound.
    KernelCheck(Common),
}

#[derive(Args)]
struct Common {
    /// JSON experiment description.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides `output_dir` in the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed (overrides `seed` in the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Exit with status 4 if any acceptance check fails.
    #[arg(long = "assert")]
    assert_checks: bool,
}

fn configure_threads() -> Result<(), ExperimentError> {
    let Ok(raw) = std::env::var("VF_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| ExperimentError::Config(format!("VF_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| ExperimentError::Config(format!("cannot size the worker pool: {e}")))
}

fn run(cli: Cli) -> Result<(RunSummary, bool), ExperimentError> {
    configure_threads()?;
    let (runner, common): (fn(&ExperimentConfig, &std::path::Path) -> _, Common) = match cli.command {
        Command::Limit(c) => (run_limit, c),
        Command::RateScan(c) => (run_rate_scan, c),
        Command::Thm2(c) => (run_thm2, c),
        Command::KernelCheck(c) => (run_kernel_check, c),
    };
    let mut config = ExperimentConfig::from_path(&common.config)?;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    let out = common
        .out
        .or_else(|| config.output_dir.clone())
        .ok_or_else(|| ExperimentError::Config("no output directory: pass --out or set `output_dir`".into()))?;
    let summary = runner(&config, &out)?;
    Ok((summary, common.assert_checks))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok((summary, assert_checks)) => {
            for c in &summary.checks {
                let mark = if c.passed { "pass" } else { "FAIL" };
                eprintln!("{mark}  {}: {} ({})", c.name, c.value, c.bound);
            }
            if assert_checks && !summary.all_passed() {
                ExitCode::from(EXIT_ASSERT as u8)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
