use std::path::Path;

use super::output::{fmt_f, OutputDir};
use super::{Check, ExperimentConfig, ExperimentError, Resolved, RunSummary};
use crate::deterministic::{
    solve_derivative_field, solve_deterministic_limit, variance_of_y, DerivativeField, Discretization, VariancePath,
};
use crate::error::Error;
use crate::kernels::{fbm_covariance, CoefficientSet, FbmKernel, Preset};
use crate::simulate::{sample_brownian, simulate_coupled, CoupledRequest, FbmSynthesizer};
use crate::stats::{
    distance_report, mean_se, rate_fit, rms_se, thm2_direct, thm2_lhs, thm2_rhs, DistanceReport, Thm2Report,
};

/// Seed offset for the bootstrap streams, so they never coincide with path streams.
const BOOTSTRAP_SALT: u64 = 0x5bd1_e995_0000_0000;

fn finish(
    out: OutputDir,
    command: &str,
    resolved: &Resolved,
    checks: Vec<Check>,
) -> Result<RunSummary, ExperimentError> {
    let mut out = out;
    out.checks(&checks)?;
    let files = out.manifest(command, &resolved.config)?;
    Ok(RunSummary { files, checks })
}

/// `Var(Y)`, treating overflow as divergence: the field can stay finite
/// while its squared norm does not.
fn checked_variance(field: &DerivativeField) -> Result<VariancePath, ExperimentError> {
    let var = variance_of_y(field);
    match var.values.iter().position(|v| !v.is_finite()) {
        Some(node) => Err(Error::Divergence { process: "variance", path: None, node }.into()),
        None => Ok(var),
    }
}

/// Writes `limit.csv` (t, x) and `variance.csv` (t, Var Y).
pub fn run_limit(config: &ExperimentConfig, dir: &Path) -> Result<RunSummary, ExperimentError> {
    let r = config.resolve()?;
    let disc = r.discretization()?;
    let x = solve_deterministic_limit(&disc, config.x0)?;
    let field = solve_derivative_field(&disc, &x)?;
    let var = checked_variance(&field)?;
    let grid = r.grid;

    let mut out = OutputDir::create(dir)?;
    let rows = |v: &[f64]| grid.nodes().zip(v).map(|(t, &v)| vec![fmt_f(t), fmt_f(v)]).collect();
    out.csv("limit.csv", &["t", "x"], rows(&x.values))?;
    out.csv("variance.csv", &["t", "variance"], rows(&var.values))?;

    let mut checks = Vec::new();
    let finite = x.values.iter().chain(&var.values).all(|v| v.is_finite());
    checks.push(Check::new("limit_finite", finite as u8 as f64, "= 1", finite));
    let last = *var.values.last().unwrap();
    let t = grid.horizon();
    let closed_form = match r.preset {
        Preset::AdditiveUnit => Some((t, 1e-12)),
        Preset::Multiplicative => Some((config.x0 * config.x0 * t, 1e-12)),
        Preset::FbmAdditive => {
            let s0 = r.coefficients.params[0];
            Some((s0 * s0 * t.powf(2.0 * config.hurst.unwrap()), 2e-2))
        }
        _ => None,
    };
    if let Some((expected, tol)) = closed_form {
        let rel = if expected == 0.0 { last.abs() } else { (last - expected).abs() / expected };
        checks.push(Check::new("terminal_variance_rel_error", rel, format!("<= {tol:e}"), rel <= tol));
    }
    finish(out, "limit", &r, checks)
}

/// Slope check that treats an exactly-zero sweep as passing ("below resolution").
fn slope_check(name: &str, points: &[(f64, f64)], ok: impl Fn(f64) -> bool, bound: &str) -> Check {
    match rate_fit(points) {
        Ok(fit) => Check::new(name, fit.slope, bound, ok(fit.slope)),
        Err(_) => {
            let exact = points.iter().all(|p| p.1 == 0.0);
            Check::new(name, f64::NAN, "exact zero", exact)
        }
    }
}

fn fit_row(quantity: &str, t: f64, points: &[(f64, f64)]) -> Vec<String> {
    match rate_fit(points) {
        Ok(f) => vec![
            quantity.into(),
            fmt_f(t),
            fmt_f(f.slope),
            fmt_f(f.intercept),
            fmt_f(f.residual),
            f.points.to_string(),
            "ok".into(),
        ],
        Err(_) => vec![
            quantity.into(),
            fmt_f(t),
            fmt_f(f64::NAN),
            fmt_f(f64::NAN),
            fmt_f(f64::NAN),
            points.len().to_string(),
            "below_resolution".into(),
        ],
    }
}

/// Writes `distances.csv`, `strong.csv` and `ratefit.csv` over the ε-sweep.
pub fn run_rate_scan(config: &ExperimentConfig, dir: &Path) -> Result<RunSummary, ExperimentError> {
    let r = config.resolve()?;
    if config.epsilons.len() < 3 {
        return Err(ExperimentError::Config("field `epsilons`: rate-scan needs at least 3 values".into()));
    }
    let disc = r.discretization()?;
    let x = solve_deterministic_limit(&disc, config.x0)?;
    let field = solve_derivative_field(&disc, &x)?;
    let batch = sample_brownian(config.paths, &r.grid, config.seed)?;
    let request = CoupledRequest {
        epsilons: config.epsilons.clone(),
        nodes: r.observation_nodes.clone(),
        with_z: true,
        with_skorokhod: false,
    };
    let s = simulate_coupled(&disc, &x, &field, &batch, &request)?;
    let z = s.z.as_ref().expect("requested");

    let mut distance_rows = Vec::new();
    let mut strong_rows = Vec::new();
    let mut fit_rows = Vec::new();
    let mut checks = Vec::new();
    let terminal = r.grid.steps();
    let mut ordering_violations = 0usize;

    for (k, &node) in r.observation_nodes.iter().enumerate() {
        let t = r.grid.node(node);
        let y = &s.y[k];
        let mut kolmogorov = Vec::new();
        let mut tv = Vec::new();
        let mut strong_f = Vec::new();
        let mut strong_x = Vec::new();
        let mut second = Vec::new();
        for (e, &eps) in config.epsilons.iter().enumerate() {
            let f = &s.fluctuation[e][k];
            let seed = config.seed ^ BOOTSTRAP_SALT ^ ((k as u64) << 16 | e as u64);
            let d: DistanceReport = distance_report(f, y, eps, seed)?;
            ordering_violations += !d.ordering_holds() as usize;
            distance_rows.push(vec![
                fmt_f(eps),
                fmt_f(t),
                fmt_f(d.kolmogorov),
                fmt_f(d.kolmogorov_se),
                fmt_f(d.tv_histogram),
                fmt_f(d.tv_se),
                d.bins.to_string(),
                d.samples_a.to_string(),
            ]);
            kolmogorov.push((eps, d.kolmogorov));
            tv.push((eps, d.tv_histogram));

            let gap: Vec<f64> = f.iter().zip(y).map(|(a, b)| a - b).collect();
            let xgap: Vec<f64> = f.iter().map(|a| eps * a).collect();
            let sec: Vec<f64> = gap.iter().zip(&z[k]).map(|(g, zz)| g / eps - 0.5 * zz).collect();
            let (rf, rf_se) = rms_se(&gap)?;
            let (rx, rx_se) = rms_se(&xgap)?;
            let (rs, rs_se) = rms_se(&sec)?;
            strong_rows.push(vec![
                fmt_f(eps),
                fmt_f(t),
                fmt_f(rf),
                fmt_f(rf_se),
                fmt_f(rx),
                fmt_f(rx_se),
                fmt_f(rs),
                fmt_f(rs_se),
            ]);
            strong_f.push((eps, rf));
            strong_x.push((eps, rx));
            second.push((rs, rs_se));
        }
        fit_rows.push(fit_row("kolmogorov", t, &kolmogorov));
        fit_rows.push(fit_row("tv_histogram", t, &tv));
        fit_rows.push(fit_row("strong_fluctuation", t, &strong_f));
        fit_rows.push(fit_row("strong_x", t, &strong_x));

        if node == terminal {
            let unit = |s: f64| (0.85..=1.15).contains(&s);
            checks.push(slope_check("strong_fluctuation_slope", &strong_f, unit, "in [0.85, 1.15]"));
            checks.push(slope_check("strong_x_slope", &strong_x, unit, "in [0.85, 1.15]"));
            checks.push(slope_check("kolmogorov_slope", &kolmogorov, |s| s >= 0.75, ">= 0.75"));
            // Largest increase between consecutive ε, in units of the combined SE.
            let worst = second
                .windows(2)
                .map(|w| {
                    let up = w[1].0 - w[0].0;
                    let se = w[0].1.hypot(w[1].1);
                    if up <= 0.0 {
                        up / se.max(f64::MIN_POSITIVE)
                    } else {
                        up / se
                    }
                })
                .fold(f64::NEG_INFINITY, f64::max);
            checks.push(Check::new("second_order_monotone", worst, "<= 2 (SE units)", worst <= 2.0));
        }
    }
    checks.push(Check::new(
        "kolmogorov_le_tv_violations",
        ordering_violations as f64,
        "= 0",
        ordering_violations == 0,
    ));

    let mut out = OutputDir::create(dir)?;
    out.csv(
        "distances.csv",
        &["epsilon", "t", "kolmogorov", "kolmogorov_se", "tv_histogram", "tv_se", "bins", "samples"],
        distance_rows,
    )?;
    out.csv(
        "strong.csv",
        &["epsilon", "t", "rms_fluct_minus_y", "se_fluct", "rms_x_minus_limit", "se_x", "rms_second_order", "se_second_order"],
        strong_rows,
    )?;
    out.csv("ratefit.csv", &["quantity", "t", "slope", "intercept", "residual", "points", "status"], fit_rows)?;
    finish(out, "rate-scan", &r, checks)
}

/// Writes `thm2.csv`: both sides of the weak expansion at `T` per `(ε, φ)`.
pub fn run_thm2(config: &ExperimentConfig, dir: &Path) -> Result<RunSummary, ExperimentError> {
    let r = config.resolve()?;
    let disc = r.discretization()?;
    let x = solve_deterministic_limit(&disc, config.x0)?;
    let field = solve_derivative_field(&disc, &x)?;
    let terminal = r.grid.steps();
    let var_t = checked_variance(&field)?.values[terminal];
    let degenerate = !(var_t > 0.0);
    let batch = sample_brownian(config.paths, &r.grid, config.seed)?;
    let request = CoupledRequest {
        epsilons: config.epsilons.clone(),
        nodes: vec![terminal],
        with_z: true,
        with_skorokhod: !degenerate,
    };
    let s = simulate_coupled(&disc, &x, &field, &batch, &request)?;
    let y = &s.y[0];
    let z = &s.z.as_ref().expect("requested")[0];

    let mut rows = Vec::new();
    let mut checks = Vec::new();
    let last = config.epsilons.len() - 1;
    for (e, &eps) in config.epsilons.iter().enumerate() {
        for &phi in &r.test_functions {
            let (lhs, lhs_se) = thm2_lhs(phi, &s.fluctuation[e][0], y, eps)?;
            let (direct, direct_se) = thm2_direct(phi, y, z)?;
            let report = match &s.skorokhod {
                Some(delta) => {
                    let (rhs, rhs_se) = thm2_rhs(phi, y, delta, var_t)?;
                    Some(Thm2Report { test_function: phi, epsilon: eps, lhs, lhs_se, rhs, rhs_se })
                }
                None => None,
            };
            let nan = fmt_f(f64::NAN);
            rows.push(match &report {
                Some(rep) => vec![
                    fmt_f(eps),
                    phi.to_string(),
                    fmt_f(lhs),
                    fmt_f(lhs_se),
                    fmt_f(rep.rhs),
                    fmt_f(rep.rhs_se),
                    fmt_f(rep.combined_se()),
                    fmt_f(rep.z_score()),
                    fmt_f(direct),
                    fmt_f(direct_se),
                    "ok".into(),
                ],
                None => vec![
                    fmt_f(eps),
                    phi.to_string(),
                    fmt_f(lhs),
                    fmt_f(lhs_se),
                    nan.clone(),
                    nan.clone(),
                    nan.clone(),
                    nan.clone(),
                    fmt_f(direct),
                    fmt_f(direct_se),
                    format!("degenerate_law: Var(Y_T) = {}", fmt_f(var_t)),
                ],
            });
            if e == last {
                let name = format!("thm2_z[{phi}]");
                checks.push(match &report {
                    Some(rep) => Check::new(name, rep.z_score(), "<= 3", rep.z_score() <= 3.0),
                    None => Check::new(name, f64::NAN, "non-degenerate law", false),
                });
            }
        }
    }
    let mut out = OutputDir::create(dir)?;
    out.csv(
        "thm2.csv",
        &[
            "epsilon",
            "test_function",
            "lhs",
            "lhs_se",
            "rhs",
            "rhs_se",
            "combined_se",
            "z_score",
            "direct",
            "direct_se",
            "status",
        ],
        rows,
    )?;
    finish(out, "thm2", &r, checks)
}

/// `c*_H = σ₀² c_H² / (H (2H-1)²)`, for `H > 1/2`.
pub(crate) fn variance_bound_constant(kernel: &FbmKernel, sigma0: f64) -> Option<f64> {
    let h = kernel.hurst();
    kernel.c_h().map(|c| sigma0 * sigma0 * c * c / (h * (2.0 * h - 1.0).powi(2)))
}

/// Writes `kernel.csv`: L² mass of `K_H` against `t^{2H}`, synthesized fBm
/// covariance against `R_H`, and for `H > 1/2` the margin
/// `Var(Y_t) - c*_H t^{2H}/2` of the additive fBm preset.
pub fn run_kernel_check(config: &ExperimentConfig, dir: &Path) -> Result<RunSummary, ExperimentError> {
    let r = config.resolve()?;
    if config.hurst_values.is_empty() {
        return Err(ExperimentError::Config("field `hurst_values`: kernel-check needs at least one value".into()));
    }
    let grid = r.grid;
    let sigma0 = if r.preset == Preset::FbmAdditive { r.coefficients.params[0] } else { 1.0 };
    let mut nodes: Vec<usize> = r.pair_nodes.iter().flat_map(|&(a, b)| [a, b]).collect();
    nodes.sort_unstable();
    nodes.dedup();
    let batch = sample_brownian(config.paths, &grid, config.seed)?;

    let mut rows = Vec::new();
    let mut checks = Vec::new();
    let row = |kind: &str, h: f64, t: f64, s: f64, est: f64, reference: f64, se: f64, metric: &str, score: f64| {
        vec![
            kind.to_string(),
            fmt_f(h),
            fmt_f(t),
            fmt_f(s),
            fmt_f(est),
            fmt_f(reference),
            fmt_f(se),
            metric.to_string(),
            fmt_f(score),
        ]
    };
    for &h in &config.hurst_values {
        let kernel = FbmKernel::new(h)?;

        let mut worst = 0.0f64;
        for &t in &config.kernel_times {
            let mass = kernel.l2_mass(t)?;
            let reference = t.powf(2.0 * h);
            let rel = (mass - reference).abs() / reference;
            worst = worst.max(rel);
            rows.push(row("l2_mass", h, t, f64::NAN, mass, reference, 0.0, "relative_error", rel));
        }
        if !config.kernel_times.is_empty() {
            checks.push(Check::new(format!("l2_mass[H={h}]"), worst, "<= 1e-3", worst <= 1e-3));
        }

        if !nodes.is_empty() {
            let synth = FbmSynthesizer::new(&kernel, &grid, &nodes)?;
            let paths = synth.simulate(&batch)?;
            let mut worst_z = 0.0f64;
            for &(jt, js) in &r.pair_nodes {
                let a = paths.at_node(jt).expect("synthesized node");
                let b = paths.at_node(js).expect("synthesized node");
                let prod: Vec<f64> = a.iter().zip(&b).map(|(u, v)| u * v).collect();
                let (cov, se) = mean_se(&prod)?;
                let (t, s) = (grid.node(jt), grid.node(js));
                let reference = fbm_covariance(h, t, s);
                let z = (cov - reference).abs() / se;
                worst_z = worst_z.max(z);
                rows.push(row("covariance", h, t, s, cov, reference, se, "z_score", z));
            }
            checks.push(Check::new(format!("covariance[H={h}]"), worst_z, "<= 3", worst_z <= 3.0));
        }

        if let Some(c_star) = variance_bound_constant(&kernel, sigma0) {
            let coefficients = CoefficientSet::preset(Preset::FbmAdditive, &[sigma0], Some(h))?;
            let disc = Discretization::new(coefficients, grid)?;
            let x = solve_deterministic_limit(&disc, config.x0)?;
            let var = checked_variance(&solve_derivative_field(&disc, &x)?)?;
            let mut min_margin = f64::INFINITY;
            for (j, t) in grid.nodes().enumerate() {
                let bound = 0.5 * c_star * t.powf(2.0 * h);
                let margin = var.values[j] - bound;
                min_margin = min_margin.min(margin);
                rows.push(row("variance_margin", h, t, f64::NAN, var.values[j], bound, 0.0, "margin", margin));
            }
            checks.push(Check::new(format!("variance_margin[H={h}]"), min_margin, ">= 0", min_margin >= 0.0));
        }
    }
    let mut out = OutputDir::create(dir)?;
    out.csv(
        "kernel.csv",
        &["kind", "hurst", "t", "s", "estimate", "reference", "se", "metric", "score"],
        rows,
    )?;
    finish(out, "kernel-check", &r, checks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bound_constant_at_h07() {
        let k = FbmKernel::new(0.7).unwrap();
        let c = variance_bound_constant(&k, 1.0).unwrap();
        // c_H² = H(2H-1)/B(2-2H, H-1/2); c* = c_H²/(H(2H-1)²) = 1/((2H-1) B(0.6, 0.2))
        let expected = 1.0 / (0.4 * crate::special::beta(0.6, 0.2));
        assert!((c - expected).abs() < 1e-12);
        assert!(variance_bound_constant(&FbmKernel::new(0.3).unwrap(), 1.0).is_none());
    }
}
