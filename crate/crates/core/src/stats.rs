//! Distances between laws, rate regression, and the weak-expansion estimators.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::simulate::DerivativeRowEnsemble;

/// Number of bootstrap resamples behind every distance standard error.
pub const BOOTSTRAP_RESAMPLES: usize = 200;

/// Lower bound on the number of histogram bins.
pub const MIN_BINS: usize = 16;

const MAX_BINS: usize = 100_000;

fn non_empty(a: &[f64], b: &[f64]) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::domain("distance between empty samples"));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::domain("samples contain non-finite values"));
    }
    Ok(())
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_unstable_by(f64::total_cmp);
    s
}

/// Two-sample Kolmogorov distance `sup_x |F_a(x) - F_b(x)|`.
pub fn kolmogorov_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    non_empty(a, b)?;
    Ok(kolmogorov_sorted(&sorted(a), &sorted(b)))
}

fn kolmogorov_sorted(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut best = 0.0f64;
    while i < a.len() && j < b.len() {
        // Step past every copy of the smaller value so ties move both CDFs at once.
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        best = best.max((i as f64 / na - j as f64 / nb).abs());
    }
    best
}

/// Freedman–Diaconis bin count for the pooled sample, at least [`MIN_BINS`].
pub fn freedman_diaconis_bins(a: &[f64], b: &[f64]) -> Result<usize> {
    non_empty(a, b)?;
    let pooled = sorted(&[a, b].concat());
    let n = pooled.len();
    let q = |p: f64| {
        let pos = p * (n - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(n - 1);
        pooled[lo] + (pos - lo as f64) * (pooled[hi] - pooled[lo])
    };
    let iqr = q(0.75) - q(0.25);
    let range = pooled[n - 1] - pooled[0];
    if iqr <= 0.0 || range <= 0.0 {
        return Ok(MIN_BINS);
    }
    let width = 2.0 * iqr / (n as f64).cbrt();
    Ok(((range / width).ceil() as usize).clamp(MIN_BINS, MAX_BINS))
}

/// Histogram total-variation distance `½ Σ_k |p_k - q_k|` on `bins` equal
/// cells spanning the pooled range.
pub fn tv_histogram(a: &[f64], b: &[f64], bins: usize) -> Result<f64> {
    non_empty(a, b)?;
    if bins < 2 {
        return Err(Error::domain(format!("need at least 2 bins, got {bins}")));
    }
    let lo = a.iter().chain(b).copied().fold(f64::INFINITY, f64::min);
    let hi = a.iter().chain(b).copied().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        return Ok(0.0);
    }
    let cell = |x: f64| (((x - lo) / (hi - lo) * bins as f64) as usize).min(bins - 1);
    let mut counts = vec![0i64; bins];
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let mut p = vec![0.0; bins];
    for &x in a {
        counts[cell(x)] += 1;
    }
    for (pk, &c) in p.iter_mut().zip(&counts) {
        *pk = c as f64 / na;
    }
    counts.fill(0);
    for &x in b {
        counts[cell(x)] += 1;
    }
    let sum: f64 = p.iter().zip(&counts).map(|(pk, &c)| (pk - c as f64 / nb).abs()).sum();
    Ok((0.5 * sum).min(1.0))
}

/// Distances between a fluctuation sample and a limit sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DistanceReport {
    pub epsilon: f64,
    pub kolmogorov: f64,
    pub kolmogorov_se: f64,
    pub tv_histogram: f64,
    pub tv_se: f64,
    pub bins: usize,
    pub samples_a: usize,
    pub samples_b: usize,
}

impl DistanceReport {
    /// `kolmogorov ≤ tv_histogram + 4 (combined SE)`: the estimator-level form
    /// of `Kolmogorov ≤ TV`.
    pub fn ordering_holds(&self) -> bool {
        self.kolmogorov <= self.tv_histogram + 4.0 * self.kolmogorov_se.hypot(self.tv_se)
    }
}

fn sample_sd(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Kolmogorov and histogram-TV distances with bootstrap standard errors.
///
/// When both samples have the same size they are treated as coupled (path
/// `m` of `a` and of `b` share a Brownian path) and resampled jointly.
/// Resample `r` draws from a ChaCha8 stream `r` keyed by `seed`, so the
/// result is independent of scheduling.
pub fn distance_report(a: &[f64], b: &[f64], epsilon: f64, seed: u64) -> Result<DistanceReport> {
    non_empty(a, b)?;
    let bins = freedman_diaconis_bins(a, b)?;
    let kolmogorov = kolmogorov_distance(a, b)?;
    let tv = tv_histogram(a, b, bins)?;
    let paired = a.len() == b.len();
    let replicates: Vec<(f64, f64)> = (0..BOOTSTRAP_RESAMPLES)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(r as u64);
            let mut ra = Vec::with_capacity(a.len());
            let mut rb = Vec::with_capacity(b.len());
            if paired {
                for _ in 0..a.len() {
                    let m = rng.random_range(0..a.len());
                    ra.push(a[m]);
                    rb.push(b[m]);
                }
            } else {
                ra.extend((0..a.len()).map(|_| a[rng.random_range(0..a.len())]));
                rb.extend((0..b.len()).map(|_| b[rng.random_range(0..b.len())]));
            }
            let k = kolmogorov_sorted(&sorted(&ra), &sorted(&rb));
            let t = tv_histogram(&ra, &rb, bins).unwrap_or(0.0);
            (k, t)
        })
        .collect();
    let ks: Vec<f64> = replicates.iter().map(|r| r.0).collect();
    let ts: Vec<f64> = replicates.iter().map(|r| r.1).collect();
    Ok(DistanceReport {
        epsilon,
        kolmogorov,
        kolmogorov_se: sample_sd(&ks),
        tv_histogram: tv,
        tv_se: sample_sd(&ts),
        bins,
        samples_a: a.len(),
        samples_b: b.len(),
    })
}

/// Least-squares line through `(ln ε, ln distance)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    /// Euclidean norm of the log-log residuals.
    pub residual: f64,
    pub points: usize,
}

pub fn rate_fit(points: &[(f64, f64)]) -> Result<RateFit> {
    if points.len() < 3 {
        return Err(Error::domain(format!("rate fit needs at least 3 points, got {}", points.len())));
    }
    if let Some(&(e, d)) = points.iter().find(|&&(e, d)| !(e > 0.0 && d > 0.0 && e.is_finite() && d.is_finite())) {
        return Err(Error::domain(format!(
            "rate fit needs positive values, got (ε, d) = ({e}, {d}); below Monte Carlo resolution"
        )));
    }
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::domain("rate fit needs at least two distinct epsilons"));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let residual = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum::<f64>()
        .sqrt();
    Ok(RateFit { slope, intercept, residual, points: points.len() })
}

/// Sample mean and its standard error.
pub fn mean_se(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::domain("mean of an empty sample"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Ok((mean, f64::NAN));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, (var / n).sqrt()))
}

/// Root mean square and its delta-method standard error.
pub fn rms_se(values: &[f64]) -> Result<(f64, f64)> {
    let squares: Vec<f64> = values.iter().map(|v| v * v).collect();
    let (ms, se) = mean_se(&squares)?;
    let rms = ms.sqrt();
    Ok((rms, if rms > 0.0 { se / (2.0 * rms) } else { 0.0 }))
}

/// `δ(Z_T D Y_T) = Z_T Y_T - ⟨D Z_T, D Y_T⟩` per path, with the inner product
/// `Σ_i DZ[i] D[i] δ` over the grid.
pub fn skorokhod_term(
    y_t: &[f64],
    z_t: &[f64],
    dz: &DerivativeRowEnsemble,
    d_row: &[f64],
    grid: &TimeGrid,
) -> Result<Vec<f64>> {
    let m = y_t.len();
    if z_t.len() != m || dz.paths() != m || d_row.len() != grid.steps() || dz.grid != *grid {
        return Err(Error::domain("skorokhod_term inputs have mismatched lengths"));
    }
    let delta = grid.delta();
    Ok((0..m)
        .map(|p| {
            let inner: f64 = dz.row(p).iter().zip(d_row).map(|(a, b)| a * b).sum();
            z_t[p] * y_t[p] - inner * delta
        })
        .collect())
}

/// Bounded test functions for the weak expansion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TestFunction {
    /// `cos(ω x)`
    Cos(f64),
    /// `tanh(β x)`
    Tanh(f64),
    /// `1 / (1 + e^{-κ x})`, a smoothed indicator of `x > 0`
    Sigmoid(f64),
    Const(f64),
}

impl TestFunction {
    pub fn value(&self, x: f64) -> f64 {
        match *self {
            TestFunction::Cos(w) => (w * x).cos(),
            TestFunction::Tanh(b) => (b * x).tanh(),
            TestFunction::Sigmoid(k) => 1.0 / (1.0 + (-k * x).exp()),
            TestFunction::Const(c) => c,
        }
    }

    pub fn derivative(&self, x: f64) -> f64 {
        match *self {
            TestFunction::Cos(w) => -w * (w * x).sin(),
            TestFunction::Tanh(b) => b / (b * x).cosh().powi(2),
            TestFunction::Sigmoid(k) => {
                let s = self.value(x);
                k * s * (1.0 - s)
            }
            TestFunction::Const(_) => 0.0,
        }
    }
}

impl fmt::Display for TestFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TestFunction::Cos(p) => write!(f, "cos:{p}"),
            TestFunction::Tanh(p) => write!(f, "tanh:{p}"),
            TestFunction::Sigmoid(p) => write!(f, "sigmoid:{p}"),
            TestFunction::Const(p) => write!(f, "const:{p}"),
        }
    }
}

impl FromStr for TestFunction {
    type Err = Error;

    /// `name` or `name:param`, e.g. `cos`, `tanh:2`, `const:0.5`.
    fn from_str(s: &str) -> Result<Self> {
        let (name, param) = match s.split_once(':') {
            Some((n, p)) => {
                let v: f64 = p
                    .trim()
                    .parse()
                    .map_err(|_| Error::domain(format!("bad parameter in test function {s:?}")))?;
                (n.trim(), Some(v))
            }
            None => (s.trim(), None),
        };
        if let Some(v) = param {
            if !v.is_finite() {
                return Err(Error::domain(format!("test function parameter must be finite: {s:?}")));
            }
        }
        let p = param.unwrap_or(1.0);
        match name {
            "cos" => Ok(TestFunction::Cos(p)),
            "tanh" => Ok(TestFunction::Tanh(p)),
            "sigmoid" => Ok(TestFunction::Sigmoid(p)),
            "const" => Ok(TestFunction::Const(p)),
            _ => Err(Error::domain(format!(
                "unknown test function {s:?}; expected cos, tanh, sigmoid or const"
            ))),
        }
    }
}

/// `E[(φ(X̃_ε) - φ(Y))/ε]` from coupled samples, with its standard error.
pub fn thm2_lhs(phi: TestFunction, fluct: &[f64], y: &[f64], eps: f64) -> Result<(f64, f64)> {
    if eps == 0.0 || !eps.is_finite() {
        return Err(Error::domain(format!("epsilon must be non-zero, got {eps}")));
    }
    if fluct.len() != y.len() {
        return Err(Error::domain("thm2_lhs needs coupled samples of equal size"));
    }
    let diffs: Vec<f64> = fluct.iter().zip(y).map(|(&a, &b)| (phi.value(a) - phi.value(b)) / eps).collect();
    mean_se(&diffs)
}

/// `E[φ(Y) δ(Z D Y)] / (2 Var Y)` with its standard error.
pub fn thm2_rhs(phi: TestFunction, y: &[f64], skorokhod: &[f64], var_y: f64) -> Result<(f64, f64)> {
    if !(var_y > 0.0) {
        return Err(Error::DegenerateLaw { variance: var_y, time: f64::NAN });
    }
    if skorokhod.len() != y.len() {
        return Err(Error::domain("thm2_rhs needs coupled samples of equal size"));
    }
    let terms: Vec<f64> = y.iter().zip(skorokhod).map(|(&v, &d)| phi.value(v) * d / (2.0 * var_y)).collect();
    mean_se(&terms)
}

/// `E[φ'(Y) Z] / 2`, the same limit before integration by parts.
pub fn thm2_direct(phi: TestFunction, y: &[f64], z: &[f64]) -> Result<(f64, f64)> {
    if z.len() != y.len() {
        return Err(Error::domain("thm2_direct needs coupled samples of equal size"));
    }
    let terms: Vec<f64> = y.iter().zip(z).map(|(&v, &w)| 0.5 * phi.derivative(v) * w).collect();
    mean_se(&terms)
}

/// Both sides of the weak expansion for one `(ε, φ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Thm2Report {
    #[serde(serialize_with = "display")]
    pub test_function: TestFunction,
    pub epsilon: f64,
    pub lhs: f64,
    pub lhs_se: f64,
    pub rhs: f64,
    pub rhs_se: f64,
}

fn display<S: serde::Serializer>(v: &TestFunction, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_str(v)
}

impl Thm2Report {
    /// `sqrt(se_lhs² + se_rhs²)`.
    pub fn combined_se(&self) -> f64 {
        self.lhs_se.hypot(self.rhs_se)
    }

    /// `|lhs - rhs| / combined SE`; zero when both sides agree exactly.
    pub fn z_score(&self) -> f64 {
        let gap = (self.lhs - self.rhs).abs();
        if gap == 0.0 {
            0.0
        } else {
            gap / self.combined_se()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kolmogorov_trivial_cases() {
        assert_eq!(kolmogorov_distance(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(kolmogorov_distance(&[0.0], &[1.0]).unwrap(), 1.0);
        assert_eq!(kolmogorov_distance(&[0.0, 1.0], &[1.0]).unwrap(), 0.5);
        assert!(kolmogorov_distance(&[], &[1.0]).is_err());
    }

    #[test]
    fn ties_are_stepped_together() {
        assert_eq!(kolmogorov_distance(&[1.0, 1.0, 1.0], &[1.0]).unwrap(), 0.0);
    }

    #[test]
    fn tv_trivial_cases() {
        let a = [0.0, 0.5, 1.0];
        assert_eq!(tv_histogram(&a, &a, 7).unwrap(), 0.0);
        assert_eq!(tv_histogram(&[0.0, 0.1], &[5.0, 6.0], 16).unwrap(), 1.0);
        assert!(tv_histogram(&a, &a, 1).is_err());
        assert!(tv_histogram(&a, &[], 4).is_err());
    }

    #[test]
    fn fd_bins_have_floor() {
        assert_eq!(freedman_diaconis_bins(&[1.0; 5], &[1.0; 5]).unwrap(), MIN_BINS);
        let wide: Vec<f64> = (0..10_000).map(|i| (i as f64).powi(3)).collect();
        assert!(freedman_diaconis_bins(&wide, &wide).unwrap() > MIN_BINS);
    }

    #[test]
    fn rate_fit_exact_powers() {
        let eps = [0.4, 0.2, 0.1, 0.05];
        let f = rate_fit(&eps.map(|e| (e, e))).unwrap();
        assert!((f.slope - 1.0).abs() < 1e-12 && f.residual < 1e-12);
        let f = rate_fit(&eps.map(|e| (e, 3.0 * e * e))).unwrap();
        assert!((f.slope - 2.0).abs() < 1e-12);
        assert!((f.intercept - 3f64.ln()).abs() < 1e-12);
        assert!(rate_fit(&[(0.1, 1.0), (0.2, 2.0)]).is_err());
        assert!(rate_fit(&[(0.1, 1.0), (0.2, 0.0), (0.3, 1.0)]).is_err());
    }

    #[test]
    fn test_function_parsing() {
        assert_eq!("cos".parse::<TestFunction>().unwrap(), TestFunction::Cos(1.0));
        assert_eq!("tanh:2.5".parse::<TestFunction>().unwrap(), TestFunction::Tanh(2.5));
        assert_eq!("sigmoid:4".parse::<TestFunction>().unwrap().to_string(), "sigmoid:4");
        assert!("exp".parse::<TestFunction>().is_err());
        assert!("cos:x".parse::<TestFunction>().is_err());
        assert!("cos:inf".parse::<TestFunction>().is_err());
    }

    #[test]
    fn test_function_derivatives() {
        for phi in [TestFunction::Cos(1.3), TestFunction::Tanh(0.7), TestFunction::Sigmoid(3.0), TestFunction::Const(2.0)] {
            for x in [-1.5, -0.2, 0.0, 0.9] {
                let h = 1e-6;
                let fd = (phi.value(x + h) - phi.value(x - h)) / (2.0 * h);
                assert!((fd - phi.derivative(x)).abs() < 1e-8, "{phi} at {x}");
            }
        }
    }

    #[test]
    fn thm2_estimators_trivial_cases() {
        let y = [0.3, -1.0, 2.0];
        assert_eq!(thm2_lhs(TestFunction::Cos(1.0), &y, &y, 0.1).unwrap(), (0.0, 0.0));
        assert_eq!(thm2_lhs(TestFunction::Const(3.0), &[1.0, 2.0], &y[..2], 0.1).unwrap().0, 0.0);
        assert!(thm2_lhs(TestFunction::Cos(1.0), &y, &y, 0.0).is_err());
        assert_eq!(thm2_rhs(TestFunction::Tanh(1.0), &y, &[0.0; 3], 1.0).unwrap(), (0.0, 0.0));
        assert!(matches!(
            thm2_rhs(TestFunction::Tanh(1.0), &y, &[0.0; 3], 0.0),
            Err(Error::DegenerateLaw { .. })
        ));
    }

    #[test]
    fn report_scores() {
        let r = Thm2Report { test_function: TestFunction::Cos(1.0), epsilon: 0.05, lhs: 1.0, lhs_se: 0.3, rhs: 0.5, rhs_se: 0.4 };
        assert!((r.combined_se() - 0.5).abs() < 1e-15);
        assert!((r.z_score() - 1.0).abs() < 1e-12);
        let r = Thm2Report { lhs: 0.0, rhs: 0.0, lhs_se: 0.0, rhs_se: 0.0, ..r };
        assert_eq!(r.z_score(), 0.0);
    }
}
