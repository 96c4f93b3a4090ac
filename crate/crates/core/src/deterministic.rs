//! Deterministic Volterra equations: the small-noise limit `x_t`, the
//! Malliavin derivative field `D_θ Y_t` and the variance of the Gaussian limit.
//!
//! Quadrature rule throughout: the state argument is taken at the left node
//! `t_i` and the kernel at the cell midpoint `s_i* = t_i + δ/2`, so the kernel
//! is never evaluated on the diagonal.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::kernels::CoefficientSet;
use crate::tables::{dot, KernelTables, LowerTriangular};

/// A coefficient set discretized on a grid.
#[derive(Debug, Clone)]
pub struct Discretization {
    coefficients: CoefficientSet,
    tables: KernelTables,
}

impl Discretization {
    pub fn new(coefficients: CoefficientSet, grid: TimeGrid) -> Result<Self> {
        let tables = KernelTables::new(&coefficients, &grid)?;
        Ok(Self { coefficients, tables })
    }

    pub fn grid(&self) -> &TimeGrid {
        self.tables.grid()
    }

    pub fn coefficients(&self) -> &CoefficientSet {
        &self.coefficients
    }

    pub fn tables(&self) -> &KernelTables {
        &self.tables
    }
}

/// The limit path `x_{t_j}`, `j = 0..=N`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LimitPath {
    pub grid: TimeGrid,
    pub preset: String,
    pub x0: f64,
    pub values: Vec<f64>,
}

/// Solves `x_t = x₀ + ∫₀ᵗ b(t, s, x_s) ds` by the explicit rule
/// `x_j = x₀ + Σ_{i<j} b(t_j, s_i*, x_i) δ`.
pub fn solve_deterministic_limit(disc: &Discretization, x0: f64) -> Result<LimitPath> {
    let grid = *disc.grid();
    let delta = grid.delta();
    let drift = disc.coefficients().drift.map;
    let n = grid.len();
    let mut values = vec![x0; n];
    let mut u = vec![0.0; n];
    for j in 0..n {
        if j > 0 {
            values[j] = x0 + dot(disc.tables().drift().row(j), &u[..j]);
        }
        if !values[j].is_finite() {
            return Err(Error::Divergence { process: "limit", path: None, node: j });
        }
        u[j] = delta * drift.value(values[j]);
    }
    Ok(LimitPath { grid, preset: disc.coefficients().name.clone(), x0, values })
}

/// State-dependent factors of the linearized coefficients along the limit
/// path. Multiplying by the tabulated kernels gives
/// `b'(t_j, s_k*, x_k) δ = k_b(j,k) · drift_d1[k]` and so on.
#[derive(Debug, Clone, PartialEq)]
pub struct Linearization {
    /// `δ f_b'(x_k)`
    pub drift_d1: Vec<f64>,
    /// `δ f_b''(x_k)`
    pub drift_d2: Vec<f64>,
    /// `f_σ(x_k)`
    pub diffusion: Vec<f64>,
    /// `f_σ'(x_k)`
    pub diffusion_d1: Vec<f64>,
}

impl Linearization {
    pub fn new(disc: &Discretization, x: &LimitPath) -> Self {
        let delta = disc.grid().delta();
        let c = disc.coefficients();
        let map = |f: &dyn Fn(f64) -> f64| x.values.iter().map(|&v| f(v)).collect::<Vec<f64>>();
        Self {
            drift_d1: map(&|v| delta * c.drift.map.d1(v)),
            drift_d2: map(&|v| delta * c.drift.map.d2(v)),
            diffusion: map(&|v| c.diffusion.map.value(v)),
            diffusion_d1: map(&|v| c.diffusion.map.d1(v)),
        }
    }

    /// True when `b'` vanishes identically along the path.
    pub fn drift_d1_vanishes(&self) -> bool {
        self.drift_d1.iter().all(|&a| a == 0.0)
    }
}

/// `D[i][j] ≈ D_{θ_i} Y_{t_j}` for `θ_i` in cell `i` and `i < j`; zero otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivativeField {
    pub grid: TimeGrid,
    pub preset: String,
    /// Row `j` of the packed matrix is the column `θ ↦ D_θ Y_{t_j}`.
    columns: LowerTriangular,
}

impl DerivativeField {
    /// `D_{θ_i} Y_{t_j}`.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.columns.get(j, i)
    }

    /// `θ_i ↦ D_{θ_i} Y_{t_j}` for `i < j`.
    pub fn column(&self, j: usize) -> &[f64] {
        self.columns.row(j)
    }
}

/// Solves `D_θ Y_t = σ(t, θ, x_θ) + ∫_θ^t b'(t, s, x_s) D_θ Y_s ds` for every
/// θ-cell by forward recursion,
/// `D[i][j] = σ(t_j, θ_i*, x_i) + Σ_{i<k<j} b'(t_j, s_k*, x_k) D[i][k] δ`.
/// θ-rows are solved in parallel; the result does not depend on scheduling.
pub fn solve_derivative_field(disc: &Discretization, x: &LimitPath) -> Result<DerivativeField> {
    let grid = *disc.grid();
    if x.grid != grid {
        return Err(Error::domain("limit path and discretization use different grids"));
    }
    let lin = Linearization::new(disc, x);
    let n = grid.len();
    let tables = disc.tables();
    let skip_integral = lin.drift_d1_vanishes();

    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            // row[j - i - 1] = D[i][j] for j > i; g[k - i - 1] = b'-weighted D[i][k]
            let len = n - i - 1;
            let mut row = vec![0.0; len];
            let mut g = vec![0.0; len];
            for j in (i + 1)..n {
                let source = tables.diffusion().get(j, i) * lin.diffusion[i];
                let value = if skip_integral || j == i + 1 {
                    source
                } else {
                    source + dot(&tables.drift().row(j)[i + 1..j], &g[..j - i - 1])
                };
                if !value.is_finite() {
                    return Err(Error::Divergence { process: "derivative field", path: None, node: j });
                }
                row[j - i - 1] = value;
                g[j - i - 1] = lin.drift_d1[j] * value;
            }
            Ok(row)
        })
        .collect::<Result<_>>()?;

    let mut columns = LowerTriangular::zeros(n);
    for (i, row) in rows.iter().enumerate() {
        for (offset, &v) in row.iter().enumerate() {
            columns.row_mut(i + 1 + offset)[i] = v;
        }
    }
    Ok(DerivativeField { grid, preset: x.preset.clone(), columns })
}

/// `Var(Y_{t_j})`, `j = 0..=N`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VariancePath {
    pub grid: TimeGrid,
    pub values: Vec<f64>,
}

/// `Var(Y_{t_j}) = Σ_{i<j} D[i][j]² δ`, the squared `L²` norm of `D Y_{t_j}`.
pub fn variance_of_y(field: &DerivativeField) -> VariancePath {
    let delta = field.grid.delta();
    let values = (0..field.grid.len())
        .map(|j| {
            let col = field.column(j);
            dot(col, col) * delta
        })
        .collect();
    VariancePath { grid: field.grid, values }
}

/// Row `J` of the resolvent `(I - A)^{-1}` of the discrete linear operator
/// `A[j][k] = b'(t_j, s_k*, x_k) δ`, for `k ≤ J`.
///
/// A linear recursion `v_j = Σ_{k<j} A[j][k] v_k + f_j` has
/// `v_J = Σ_{k ≤ J} r_k f_k`.
pub fn resolvent_row(disc: &Discretization, lin: &Linearization, terminal: usize) -> Vec<f64> {
    let mut r = vec![0.0; terminal + 1];
    r[terminal] = 1.0;
    let drift = disc.tables().drift();
    for k in (0..terminal).rev() {
        let mut acc = 0.0;
        for j in (k + 1)..=terminal {
            acc += r[j] * drift.get(j, k);
        }
        r[k] = acc * lin.drift_d1[k];
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{Preset, StateMap, Term, TimeKernel};
    use approx::assert_relative_eq;

    fn custom(drift: StateMap, diffusion: StateMap) -> CoefficientSet {
        CoefficientSet::new(
            "custom",
            Term::new(TimeKernel::Constant(1.0), drift),
            Term::new(TimeKernel::Constant(1.0), diffusion),
        )
    }

    fn disc(c: CoefficientSet, t: f64, n: usize) -> Discretization {
        Discretization::new(c, TimeGrid::new(t, n).unwrap()).unwrap()
    }

    #[test]
    fn zero_drift_keeps_initial_value() {
        let d = disc(CoefficientSet::preset(Preset::AdditiveUnit, &[], None).unwrap(), 1.0, 16);
        let x = solve_deterministic_limit(&d, 2.0).unwrap();
        assert!(x.values.iter().all(|&v| v == 2.0));
    }

    #[test]
    fn unit_drift_gives_time() {
        let d = disc(custom(StateMap::Constant(1.0), StateMap::Constant(0.0)), 1.0, 10);
        let x = solve_deterministic_limit(&d, 0.0).unwrap();
        for (j, v) in x.values.iter().enumerate() {
            assert_relative_eq!(*v, d.grid().node(j), epsilon = 1e-14);
        }
    }

    #[test]
    fn linear_drift_converges_to_exponential_at_first_order() {
        let err = |n| {
            let d = disc(custom(StateMap::Linear(1.0), StateMap::Constant(1.0)), 1.0, n);
            let x = solve_deterministic_limit(&d, 1.0).unwrap();
            (x.values[n] - std::f64::consts::E).abs()
        };
        assert!(err(256) < 2e-2);
        let ratio = err(128) / err(256);
        assert!((1.6..=2.4).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn divergence_is_reported() {
        let d = disc(custom(StateMap::Linear(1e300), StateMap::Constant(1.0)), 1.0, 8);
        let err = solve_deterministic_limit(&d, 1e10).unwrap_err();
        assert!(matches!(err, Error::Divergence { node: 1, .. }), "{err:?}");
    }

    #[test]
    fn field_without_drift_derivative_is_the_diffusion() {
        let d = disc(CoefficientSet::preset(Preset::Multiplicative, &[], None).unwrap(), 1.0, 8);
        let x = solve_deterministic_limit(&d, 1.5).unwrap();
        let f = solve_derivative_field(&d, &x).unwrap();
        for j in 0..9 {
            for i in 0..9 {
                let expected = if i < j { 1.5 } else { 0.0 };
                assert_eq!(f.get(i, j), expected);
            }
        }
    }

    #[test]
    fn linear_field_is_exponential() {
        let n = 256;
        let d = disc(custom(StateMap::Linear(1.0), StateMap::Constant(1.0)), 1.0, n);
        let x = solve_deterministic_limit(&d, 0.0).unwrap();
        let f = solve_derivative_field(&d, &x).unwrap();
        let g = d.grid();
        for &(i, j) in &[(0, n), (10, 200), (128, n), (200, 201)] {
            let exact = (g.node(j) - g.midpoint(i)).exp();
            assert!((f.get(i, j) - exact).abs() < 2e-2, "({i},{j}) {} vs {exact}", f.get(i, j));
        }
    }

    #[test]
    fn fbm_field_is_the_kernel() {
        let d = disc(CoefficientSet::preset(Preset::FbmAdditive, &[], Some(0.7)).unwrap(), 1.0, 32);
        let x = solve_deterministic_limit(&d, 0.3).unwrap();
        let f = solve_derivative_field(&d, &x).unwrap();
        let k = d.coefficients().fbm_kernel().unwrap();
        let g = d.grid();
        for &(i, j) in &[(0, 32), (5, 6), (17, 30)] {
            assert_eq!(f.get(i, j), k.eval(g.node(j), g.midpoint(i)).unwrap());
        }
    }

    #[test]
    fn variance_of_brownian_limit_is_time() {
        let d = disc(CoefficientSet::preset(Preset::AdditiveUnit, &[], None).unwrap(), 2.0, 16);
        let x = solve_deterministic_limit(&d, 0.0).unwrap();
        let v = variance_of_y(&solve_derivative_field(&d, &x).unwrap());
        assert_eq!(v.values[0], 0.0);
        for (j, var) in v.values.iter().enumerate() {
            assert_relative_eq!(*var, d.grid().node(j), epsilon = 1e-13);
        }
        let d = disc(CoefficientSet::preset(Preset::Multiplicative, &[], None).unwrap(), 1.0, 16);
        let x = solve_deterministic_limit(&d, 1.0).unwrap();
        let v = variance_of_y(&solve_derivative_field(&d, &x).unwrap());
        assert_relative_eq!(v.values[16], 1.0, epsilon = 1e-13);
    }

    #[test]
    fn fbm_variance_matches_power_law() {
        let d = disc(CoefficientSet::preset(Preset::FbmAdditive, &[], Some(0.7)).unwrap(), 1.0, 512);
        let x = solve_deterministic_limit(&d, 0.0).unwrap();
        let v = variance_of_y(&solve_derivative_field(&d, &x).unwrap());
        assert!((v.values[512] - 1.0).abs() <= 2e-2, "{}", v.values[512]);
    }

    #[test]
    fn resolvent_solves_the_linear_recursion() {
        let d = disc(CoefficientSet::preset(Preset::Trig, &[], None).unwrap(), 1.0, 24);
        let x = solve_deterministic_limit(&d, 0.7).unwrap();
        let lin = Linearization::new(&d, &x);
        let forcing: Vec<f64> = (0..25).map(|j| (j as f64 * 0.37).sin()).collect();
        let mut v = vec![0.0; 25];
        for j in 0..25 {
            let mut acc = forcing[j];
            for k in 0..j {
                acc += d.tables().drift().get(j, k) * lin.drift_d1[k] * v[k];
            }
            v[j] = acc;
        }
        for terminal in [24, 13] {
            let r = resolvent_row(&d, &lin, terminal);
            let via: f64 = r.iter().zip(&forcing).map(|(a, b)| a * b).sum();
            assert_relative_eq!(via, v[terminal], max_relative = 1e-12);
        }
    }
}
