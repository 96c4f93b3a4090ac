//! Monte Carlo engine.
//!
//! Brownian increments are generated per path from a counter-based stream
//! keyed by `(seed, path)`, so any subset of paths can be regenerated in any
//! order. Every process of one experiment (`X_ε`, the fluctuation, `Y`, `Z`,
//! `D Z`) is driven by the same increments. Paths are processed in parallel
//! chunks and written to fixed slots, so results do not depend on the number
//! of worker threads.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::deterministic::{resolvent_row, DerivativeField, Discretization, LimitPath, Linearization};
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::kernels::FbmKernel;
use crate::quadrature::tanh_sinh;
use crate::tables::{dot, KernelTables};

const CHUNK: usize = 512;

#[derive(Debug, Clone)]
enum Source {
    Counter { seed: u64 },
    Zero,
    Explicit(Arc<Vec<Vec<f64>>>),
}

/// `M` paths of Brownian increments `ΔB[m][i] ~ N(0, δ)`, `i = 0..N`.
#[derive(Debug, Clone)]
pub struct BrownianBatch {
    grid: TimeGrid,
    paths: usize,
    source: Source,
}

/// Counter-based batch: path `m` is stream `m` of a ChaCha8 generator keyed by `seed`.
pub fn sample_brownian(paths: usize, grid: &TimeGrid, seed: u64) -> Result<BrownianBatch> {
    if paths == 0 {
        return Err(Error::domain("a Brownian batch needs at least one path"));
    }
    Ok(BrownianBatch { grid: *grid, paths, source: Source::Counter { seed } })
}

impl BrownianBatch {
    /// All increments zero.
    pub fn zeros(paths: usize, grid: &TimeGrid) -> Self {
        Self { grid: *grid, paths, source: Source::Zero }
    }

    /// Caller-supplied increments, one vector of length `N` per path.
    pub fn from_increments(grid: &TimeGrid, increments: Vec<Vec<f64>>) -> Result<Self> {
        if increments.is_empty() || increments.iter().any(|p| p.len() != grid.steps()) {
            return Err(Error::domain(format!(
                "explicit increments must be non-empty with {} entries per path",
                grid.steps()
            )));
        }
        Ok(Self { grid: *grid, paths: increments.len(), source: Source::Explicit(Arc::new(increments)) })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn paths(&self) -> usize {
        self.paths
    }

    pub fn seed(&self) -> Option<u64> {
        match self.source {
            Source::Counter { seed } => Some(seed),
            _ => None,
        }
    }

    /// Writes the `N` increments of path `m` into `out`.
    pub fn fill(&self, m: usize, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.grid.steps());
        match &self.source {
            Source::Counter { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                rng.set_stream(m as u64);
                let scale = self.grid.delta().sqrt();
                for v in out.iter_mut() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *v = scale * z;
                }
            }
            Source::Zero => out.fill(0.0),
            Source::Explicit(inc) => out.copy_from_slice(&inc[m]),
        }
    }

    /// Standard normals for path `m` from a stream independent of the
    /// increments (keyed by `seed ^ salt`); zeros for non-random batches.
    pub fn fill_auxiliary(&self, m: usize, salt: u64, out: &mut [f64]) {
        match self.source {
            Source::Counter { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt);
                rng.set_stream(m as u64);
                for v in out.iter_mut() {
                    *v = StandardNormal.sample(&mut rng);
                }
            }
            _ => out.fill(0.0),
        }
    }

    pub fn path(&self, m: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.grid.steps()];
        self.fill(m, &mut out);
        out
    }

    fn check_grid(&self, grid: &TimeGrid) -> Result<()> {
        if self.grid != *grid {
            return Err(Error::domain("Brownian batch and discretization use different grids"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Process {
    X,
    Fluctuation,
    Y,
    Z,
    Fbm,
}

/// Simulated values of one process at selected grid nodes, path-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PathEnsemble {
    pub process: Process,
    pub grid: TimeGrid,
    pub epsilon: Option<f64>,
    pub preset: String,
    pub seed: Option<u64>,
    nodes: Vec<usize>,
    values: Vec<f64>,
}

impl PathEnsemble {
    pub fn paths(&self) -> usize {
        if self.nodes.is_empty() {
            0
        } else {
            self.values.len() / self.nodes.len()
        }
    }

    pub fn nodes(&self) -> &[usize] {
        &self.nodes
    }

    /// Values of path `m` at the observed nodes.
    pub fn path(&self, m: usize) -> &[f64] {
        let k = self.nodes.len();
        &self.values[m * k..(m + 1) * k]
    }

    /// Values at grid node `j` across paths, if `j` was observed.
    pub fn at_node(&self, j: usize) -> Option<Vec<f64>> {
        let k = self.nodes.iter().position(|&n| n == j)?;
        let stride = self.nodes.len();
        Some(self.values.iter().skip(k).step_by(stride).copied().collect())
    }

    pub fn observes_all_nodes(&self) -> bool {
        self.nodes.len() == self.grid.len() && self.nodes.iter().enumerate().all(|(i, &n)| i == n)
    }
}

/// Every node of the grid, for use as an observation set.
pub fn all_nodes(grid: &TimeGrid) -> Vec<usize> {
    (0..grid.len()).collect()
}

fn check_nodes(nodes: &[usize], grid: &TimeGrid) -> Result<()> {
    if nodes.is_empty() || nodes.iter().any(|&j| j >= grid.len()) {
        return Err(Error::domain("observation nodes must be non-empty and on the grid"));
    }
    Ok(())
}

/// Per-chunk scratch space.
struct Workspace {
    db: Vec<f64>,
    u: Vec<f64>,
    w: Vec<f64>,
    fused: Vec<f64>,
    a: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
}

impl Workspace {
    fn new(n: usize) -> Self {
        let z = vec![0.0; n];
        Self { db: vec![0.0; n.saturating_sub(1)], u: z.clone(), w: z.clone(), fused: z.clone(), a: z.clone(), b: z.clone(), c: z }
    }
}

/// Runs `f(m, workspace, out)` for every path with `stride` output slots per
/// path. The lowest failing path index wins, independent of scheduling.
fn run_paths<F>(paths: usize, stride: usize, n: usize, f: F) -> Result<Vec<f64>>
where
    F: Fn(usize, &mut Workspace, &mut [f64]) -> Result<()> + Sync,
{
    let mut values = vec![0.0; paths * stride];
    if stride == 0 {
        return Ok(values);
    }
    let outcomes: Vec<Result<()>> = values
        .par_chunks_mut(CHUNK * stride)
        .enumerate()
        .map(|(chunk, block)| {
            let mut ws = Workspace::new(n);
            for (offset, out) in block.chunks_mut(stride).enumerate() {
                f(chunk * CHUNK + offset, &mut ws, out)?;
            }
            Ok(())
        })
        .collect();
    outcomes.into_iter().collect::<Result<Vec<()>>>()?;
    Ok(values)
}

fn diverged(process: &'static str, m: usize, node: usize) -> Error {
    Error::Divergence { process, path: Some(m), node }
}

// ---- per-path recursions -------------------------------------------------

/// `X_j = x₀ + Σ_{i<j} b(t_j, s_i*, X_i) δ + ε Σ_{i<j} σ(t_j, s_i*, X_i) ΔB_i`.
fn x_path(disc: &Discretization, x0: f64, eps: f64, ws: &mut Workspace, out: &mut [f64]) -> Option<usize> {
    let tables = disc.tables();
    let c = disc.coefficients();
    let delta = disc.grid().delta();
    let n = out.len();
    for j in 0..n {
        out[j] = if j == 0 { x0 } else { x0 + tables.convolve(j, &ws.u, &ws.w, &ws.fused) };
        if !out[j].is_finite() {
            return Some(j);
        }
        if j + 1 < n {
            ws.u[j] = delta * c.drift.map.value(out[j]);
            ws.w[j] = eps * c.diffusion.map.value(out[j]) * ws.db[j];
            ws.fused[j] = ws.u[j] + ws.w[j];
        }
    }
    None
}

/// The fluctuation `(X - x)/ε` by its own recursion,
/// `F_j = Σ_{i<j} k_b (f_b(x_i + ε F_i) - f_b(x_i))/ε δ + Σ_{i<j} k_σ f_σ(x_i + ε F_i) ΔB_i`,
/// which avoids cancelling `X - x` at small `ε`.
fn fluctuation_path(
    disc: &Discretization,
    x: &[f64],
    eps: f64,
    ws: &mut Workspace,
    out: &mut [f64],
) -> Option<usize> {
    let tables = disc.tables();
    let c = disc.coefficients();
    let delta = disc.grid().delta();
    let n = out.len();
    for j in 0..n {
        out[j] = if j == 0 { 0.0 } else { tables.convolve(j, &ws.u, &ws.w, &ws.fused) };
        if !out[j].is_finite() {
            return Some(j);
        }
        if j + 1 < n {
            ws.u[j] = delta * c.drift.map.difference_quotient(x[j], eps, out[j]);
            ws.w[j] = c.diffusion.map.value(x[j] + eps * out[j]) * ws.db[j];
            ws.fused[j] = ws.u[j] + ws.w[j];
        }
    }
    None
}

/// `Y_j = Σ_{i<j} b'(t_j, s_i*, x_i) Y_i δ + Σ_{i<j} σ(t_j, s_i*, x_i) ΔB_i`.
fn y_path(tables: &KernelTables, lin: &Linearization, ws: &mut Workspace, out: &mut [f64]) -> Option<usize> {
    let n = out.len();
    for j in 0..n {
        out[j] = if j == 0 { 0.0 } else { tables.convolve(j, &ws.u, &ws.w, &ws.fused) };
        if !out[j].is_finite() {
            return Some(j);
        }
        if j + 1 < n {
            ws.u[j] = lin.drift_d1[j] * out[j];
            ws.w[j] = lin.diffusion[j] * ws.db[j];
            ws.fused[j] = ws.u[j] + ws.w[j];
        }
    }
    None
}

/// `Z_j = Σ_{i<j} [b' Z_i + b'' Y_i²] δ + 2 Σ_{i<j} σ' Y_i ΔB_i`, coefficients at `(t_j, s_i*, x_i)`.
fn z_path(
    tables: &KernelTables,
    lin: &Linearization,
    y: &[f64],
    ws: &mut Workspace,
    out: &mut [f64],
) -> Option<usize> {
    let n = out.len();
    for j in 0..n {
        out[j] = if j == 0 { 0.0 } else { tables.convolve(j, &ws.u, &ws.w, &ws.fused) };
        if !out[j].is_finite() {
            return Some(j);
        }
        if j + 1 < n {
            ws.u[j] = lin.drift_d1[j] * out[j] + lin.drift_d2[j] * y[j] * y[j];
            ws.w[j] = 2.0 * lin.diffusion_d1[j] * y[j] * ws.db[j];
            ws.fused[j] = ws.u[j] + ws.w[j];
        }
    }
    None
}

/// Deterministic weights for the Malliavin derivative of `Z` at node `J`.
///
/// Differentiating the discrete `Z` recursion in `ΔB_i` gives a linear
/// recursion with the same operator as `Y`; through the resolvent row `r`
/// its terminal value is
///
/// ```text
/// D_{θ_i} Z_J = Σ_{i<k<J} c_k D[i][k] + 2 Y_i γ_i,    c_k = 2 Y_k β_k + 2 ΔB_k γ_k,
/// β_k = Σ_{k<j≤J} r_j b''(t_j, s_k*, x_k) δ,          γ_k = Σ_{k<j≤J} r_j σ'(t_j, s_k*, x_k).
/// ```
///
/// Contracting with `D[·][J]` yields `⟨D Z_J, D Y_J⟩` in `O(N)` per path.
#[derive(Debug, Clone)]
pub struct SkorokhodWeights {
    terminal: usize,
    delta: f64,
    beta: Vec<f64>,
    gamma: Vec<f64>,
    /// `Σ_{i<k} D[i][J] D[i][k]`
    cross: Vec<f64>,
    /// `D[k][J]`
    dy_terminal: Vec<f64>,
}

impl SkorokhodWeights {
    pub fn new(disc: &Discretization, lin: &Linearization, field: &DerivativeField, terminal: usize) -> Result<Self> {
        if terminal == 0 || terminal >= disc.grid().len() {
            return Err(Error::domain(format!("terminal node {terminal} outside (0, N]")));
        }
        let r = resolvent_row(disc, lin, terminal);
        let tables = disc.tables();
        let mut beta = vec![0.0; terminal];
        let mut gamma = vec![0.0; terminal];
        for k in 0..terminal {
            let (mut sb, mut sg) = (0.0, 0.0);
            for j in (k + 1)..=terminal {
                sb += r[j] * tables.drift().get(j, k);
                sg += r[j] * tables.diffusion().get(j, k);
            }
            beta[k] = sb * lin.drift_d2[k];
            gamma[k] = sg * lin.diffusion_d1[k];
        }
        let col = field.column(terminal);
        let cross = (0..terminal).map(|k| dot(&col[..k], field.column(k))).collect();
        Ok(Self {
            terminal,
            delta: disc.grid().delta(),
            beta,
            gamma,
            cross,
            dy_terminal: col.to_vec(),
        })
    }

    fn c(&self, k: usize, y: &[f64], db: &[f64]) -> f64 {
        2.0 * y[k] * self.beta[k] + 2.0 * db[k] * self.gamma[k]
    }

    /// `⟨D Z_J, D Y_J⟩_{L²}` for one path.
    pub fn inner_product(&self, y: &[f64], db: &[f64]) -> f64 {
        let mut acc = 0.0;
        for k in 0..self.terminal {
            acc += self.c(k, y, db) * self.cross[k] + 2.0 * y[k] * self.gamma[k] * self.dy_terminal[k];
        }
        self.delta * acc
    }

    /// `D_{θ_i} Z_J` for `i = 0..N` (zero for `i ≥ J`).
    pub fn derivative_row(&self, field: &DerivativeField, y: &[f64], db: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for k in 1..self.terminal {
            let ck = self.c(k, y, db);
            for (o, d) in out[..k].iter_mut().zip(field.column(k)) {
                *o += ck * d;
            }
        }
        for i in 0..self.terminal {
            out[i] += 2.0 * y[i] * self.gamma[i];
        }
    }
}

// ---- ensemble operations -------------------------------------------------

fn gather(full: &[f64], nodes: &[usize], out: &mut [f64]) {
    for (o, &j) in out.iter_mut().zip(nodes) {
        *o = full[j];
    }
}

fn ensemble(
    process: Process,
    grid: TimeGrid,
    epsilon: Option<f64>,
    preset: &str,
    batch: &BrownianBatch,
    nodes: &[usize],
    values: Vec<f64>,
) -> PathEnsemble {
    PathEnsemble {
        process,
        grid,
        epsilon,
        preset: preset.to_string(),
        seed: batch.seed(),
        nodes: nodes.to_vec(),
        values,
    }
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::domain(format!("epsilon must lie in (0, 1), got {eps}")));
    }
    Ok(())
}

/// Euler scheme for `X_ε` with left-point state and Itô increments.
pub fn simulate_x(
    disc: &Discretization,
    x0: f64,
    eps: f64,
    batch: &BrownianBatch,
    nodes: &[usize],
) -> Result<PathEnsemble> {
    check_eps(eps)?;
    let grid = *disc.grid();
    batch.check_grid(&grid)?;
    check_nodes(nodes, &grid)?;
    let n = grid.len();
    let values = run_paths(batch.paths(), nodes.len(), n, |m, ws, out| {
        batch.fill(m, &mut ws.db);
        let mut full = std::mem::take(&mut ws.a);
        let bad = x_path(disc, x0, eps, ws, &mut full);
        gather(&full, nodes, out);
        ws.a = full;
        bad.map_or(Ok(()), |j| Err(diverged("X", m, j)))
    })?;
    Ok(ensemble(Process::X, grid, Some(eps), &disc.coefficients().name, batch, nodes, values))
}

/// `(X - x)/ε` from a simulated `X` ensemble.
pub fn fluctuation(xs: &PathEnsemble, x: &LimitPath, eps: f64) -> Result<PathEnsemble> {
    if eps == 0.0 || !eps.is_finite() {
        return Err(Error::domain(format!("fluctuation needs a non-zero epsilon, got {eps}")));
    }
    if xs.grid != x.grid {
        return Err(Error::domain("ensemble and limit path use different grids"));
    }
    let k = xs.nodes.len();
    let values = xs
        .values
        .iter()
        .enumerate()
        .map(|(idx, &v)| (v - x.values[xs.nodes[idx % k]]) / eps)
        .collect();
    Ok(PathEnsemble { process: Process::Fluctuation, epsilon: Some(eps), values, ..xs.clone() })
}

/// The fluctuation simulated directly from its difference-quotient recursion;
/// equal to `fluctuation(simulate_x(..))` up to rounding.
pub fn simulate_fluctuation(
    disc: &Discretization,
    x: &LimitPath,
    eps: f64,
    batch: &BrownianBatch,
    nodes: &[usize],
) -> Result<PathEnsemble> {
    check_eps(eps)?;
    let grid = *disc.grid();
    batch.check_grid(&grid)?;
    check_nodes(nodes, &grid)?;
    let values = run_paths(batch.paths(), nodes.len(), grid.len(), |m, ws, out| {
        batch.fill(m, &mut ws.db);
        let mut full = std::mem::take(&mut ws.a);
        let bad = fluctuation_path(disc, &x.values, eps, ws, &mut full);
        gather(&full, nodes, out);
        ws.a = full;
        bad.map_or(Ok(()), |j| Err(diverged("fluctuation", m, j)))
    })?;
    Ok(ensemble(Process::Fluctuation, grid, Some(eps), &disc.coefficients().name, batch, nodes, values))
}

/// `Y_j = Σ_{i<j} D[i][j] ΔB_i`: the Clark–Ocone representation, exactly
/// Gaussian on the grid.
pub fn simulate_y_exact(field: &DerivativeField, batch: &BrownianBatch, nodes: &[usize]) -> Result<PathEnsemble> {
    let grid = field.grid;
    batch.check_grid(&grid)?;
    check_nodes(nodes, &grid)?;
    let values = run_paths(batch.paths(), nodes.len(), grid.len(), |m, ws, out| {
        batch.fill(m, &mut ws.db);
        for (o, &j) in out.iter_mut().zip(nodes) {
            *o = dot(field.column(j), &ws.db[..j]);
        }
        Ok(())
    })?;
    Ok(ensemble(Process::Y, grid, None, &field.preset, batch, nodes, values))
}

/// Euler scheme for the linear equation of `Y`.
pub fn simulate_y_euler(
    disc: &Discretization,
    x: &LimitPath,
    batch: &BrownianBatch,
    nodes: &[usize],
) -> Result<PathEnsemble> {
    let grid = *disc.grid();
    batch.check_grid(&grid)?;
    check_nodes(nodes, &grid)?;
    let lin = Linearization::new(disc, x);
    let values = run_paths(batch.paths(), nodes.len(), grid.len(), |m, ws, out| {
        batch.fill(m, &mut ws.db);
        let mut full = std::mem::take(&mut ws.a);
        let bad = y_path(disc.tables(), &lin, ws, &mut full);
        gather(&full, nodes, out);
        ws.a = full;
        bad.map_or(Ok(()), |j| Err(diverged("Y", m, j)))
    })?;
    Ok(ensemble(Process::Y, grid, None, &disc.coefficients().name, batch, nodes, values))
}

fn check_coupled_y(y: &PathEnsemble, batch: &BrownianBatch) -> Result<()> {
    if !y.observes_all_nodes() {
        return Err(Error::domain("Y must be observed at every grid node"));
    }
    if y.paths() != batch.paths() || y.seed != batch.seed() || y.grid != *batch.grid() {
        return Err(Error::domain("Y was not simulated from this Brownian batch"));
    }
    Ok(())
}

/// Euler scheme for the correction process `Z`, coupled to `Y` through the batch.
pub fn simulate_z(
    disc: &Discretization,
    x: &LimitPath,
    y: &PathEnsemble,
    batch: &BrownianBatch,
    nodes: &[usize],
) -> Result<PathEnsemble> {
    let grid = *disc.grid();
    batch.check_grid(&grid)?;
    check_coupled_y(y, batch)?;
    check_nodes(nodes, &grid)?;
    let lin = Linearization::new(disc, x);
    let values = run_paths(batch.paths(), nodes.len(), grid.len(), |m, ws, out| {
        batch.fill(m, &mut ws.db);
        let mut full = std::mem::take(&mut ws.a);
        let bad = z_path(disc.tables(), &lin, y.path(m), ws, &mut full);
        gather(&full, nodes, out);
        ws.a = full;
        bad.map_or(Ok(()), |j| Err(diverged("Z", m, j)))
    })?;
    Ok(ensemble(Process::Z, grid, None, &disc.coefficients().name, batch, nodes, values))
}

/// `D_{θ_i} Z_T` per path, `i = 0..N`.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivativeRowEnsemble {
    pub grid: TimeGrid,
    rows: Vec<f64>,
}

impl DerivativeRowEnsemble {
    pub fn paths(&self) -> usize {
        self.rows.len() / self.grid.steps()
    }

    pub fn row(&self, m: usize) -> &[f64] {
        let n = self.grid.steps();
        &self.rows[m * n..(m + 1) * n]
    }
}

/// Terminal row `θ ↦ D_θ Z_T` of the Malliavin derivative of `Z`.
pub fn simulate_dz_terminal(
    disc: &Discretization,
    x: &LimitPath,
    y: &PathEnsemble,
    field: &DerivativeField,
    batch: &BrownianBatch,
) -> Result<DerivativeRowEnsemble> {
    let grid = *disc.grid();
    batch.check_grid(&grid)?;
    check_coupled_y(y, batch)?;
    let lin = Linearization::new(disc, x);
    let weights = SkorokhodWeights::new(disc, &lin, field, grid.steps())?;
    let rows = run_paths(batch.paths(), grid.steps(), grid.len(), |m, ws, out| {
        batch.fill(m, &mut ws.db);
        let mut full = std::mem::take(&mut ws.a);
        weights.derivative_row(field, y.path(m), &ws.db, &mut full);
        out.copy_from_slice(&full[..grid.steps()]);
        ws.a = full;
        match out.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(diverged("DZ", m, i)),
            None => Ok(()),
        }
    })?;
    Ok(DerivativeRowEnsemble { grid, rows })
}

// ---- fused coupled simulation --------------------------------------------

/// What [`simulate_coupled`] should record.
#[derive(Debug, Clone)]
pub struct CoupledRequest {
    pub epsilons: Vec<f64>,
    pub nodes: Vec<usize>,
    pub with_z: bool,
    /// Record `δ(Z_T D Y_T)` at the last grid node (implies `with_z`).
    pub with_skorokhod: bool,
}

/// Coupled samples, each indexed `[observation][path]`.
#[derive(Debug, Clone)]
pub struct CoupledSamples {
    pub nodes: Vec<usize>,
    pub epsilons: Vec<f64>,
    pub y: Vec<Vec<f64>>,
    pub z: Option<Vec<Vec<f64>>>,
    /// `[epsilon][observation][path]`
    pub fluctuation: Vec<Vec<Vec<f64>>>,
    /// `δ(Z_T D Y_T)` per path.
    pub skorokhod: Option<Vec<f64>>,
}

/// Simulates `Y`, optionally `Z` and `δ(Z_T D Y_T)`, and the fluctuation for
/// every `ε`, all from one Brownian path at a time, keeping only the
/// requested nodes.
pub fn simulate_coupled(
    disc: &Discretization,
    x: &LimitPath,
    field: &DerivativeField,
    batch: &BrownianBatch,
    request: &CoupledRequest,
) -> Result<CoupledSamples> {
    let grid = *disc.grid();
    batch.check_grid(&grid)?;
    check_nodes(&request.nodes, &grid)?;
    for &e in &request.epsilons {
        check_eps(e)?;
    }
    let with_z = request.with_z || request.with_skorokhod;
    let lin = Linearization::new(disc, x);
    let weights = if request.with_skorokhod {
        Some(SkorokhodWeights::new(disc, &lin, field, grid.steps())?)
    } else {
        None
    };
    let k = request.nodes.len();
    let ne = request.epsilons.len();
    let stride = k * (1 + with_z as usize + ne) + request.with_skorokhod as usize;
    let n = grid.len();

    let values = run_paths(batch.paths(), stride, n, |m, ws, out| {
        batch.fill(m, &mut ws.db);
        let mut y = std::mem::take(&mut ws.a);
        let mut z = std::mem::take(&mut ws.b);
        let mut f = std::mem::take(&mut ws.c);
        let mut result = Ok(());
        if let Some(j) = y_path(disc.tables(), &lin, ws, &mut y) {
            result = Err(diverged("Y", m, j));
        }
        gather(&y, &request.nodes, &mut out[..k]);
        let mut pos = k;
        if result.is_ok() && with_z {
            if let Some(j) = z_path(disc.tables(), &lin, &y, ws, &mut z) {
                result = Err(diverged("Z", m, j));
            }
            gather(&z, &request.nodes, &mut out[pos..pos + k]);
            pos += k;
        }
        for &eps in &request.epsilons {
            if result.is_err() {
                break;
            }
            if let Some(j) = fluctuation_path(disc, &x.values, eps, ws, &mut f) {
                result = Err(diverged("fluctuation", m, j));
            }
            gather(&f, &request.nodes, &mut out[pos..pos + k]);
            pos += k;
        }
        if let (Some(w), true) = (&weights, result.is_ok()) {
            let last = grid.steps();
            out[pos] = z[last] * y[last] - w.inner_product(&y, &ws.db);
        }
        ws.a = y;
        ws.b = z;
        ws.c = f;
        result
    })?;

    let paths = batch.paths();
    let column = |offset: usize| -> Vec<f64> { (0..paths).map(|m| values[m * stride + offset]).collect() };
    let block = |start: usize| -> Vec<Vec<f64>> { (0..k).map(|o| column(start + o)).collect() };
    let y = block(0);
    let mut pos = k;
    let z = if with_z {
        pos += k;
        Some(block(k))
    } else {
        None
    };
    let fluctuation = (0..ne).map(|e| block(pos + e * k)).collect();
    let skorokhod = request.with_skorokhod.then(|| column(pos + ne * k));
    Ok(CoupledSamples {
        nodes: request.nodes.clone(),
        epsilons: request.epsilons.clone(),
        y,
        z,
        fluctuation,
        skorokhod,
    })
}

// ---- fractional Brownian motion ------------------------------------------

const FBM_RESIDUAL_SALT: u64 = 0x7f4a_7c15_9e37_79b9;

/// Synthesizes `B^H_t = ∫₀ᵗ K_H(t, s) dB_s` at selected nodes.
///
/// The integral splits, cell by cell, into the projection on the grid
/// increment plus an orthogonal remainder:
///
/// ```text
/// ∫_{cell i} K(t, s) dB_s = k̄_i(t) ΔB_i + ∫_{cell i} (K(t, s) - k̄_i(t)) dB_s,
/// k̄_i(t) = δ⁻¹ ∫_{cell i} K(t, s) ds.
/// ```
///
/// The projections use the batch increments. The remainders are independent
/// of every `ΔB`, and their sum over cells is a centred Gaussian vector with
/// covariance `G - δ k̄ k̄ᵀ`, where `G[a][b] = ∫ K(t_a, s) K(t_b, s) ds` is
/// computed by quadrature. It is drawn from an auxiliary stream through a
/// Cholesky factor. Without it, the cell averages lose the mass of the
/// `s^(1/2-H)` singularity at `s = 0`, which is about 10% of the variance for
/// `H = 0.9` at `N = 512`.
#[derive(Debug, Clone)]
pub struct FbmSynthesizer {
    grid: TimeGrid,
    nodes: Vec<usize>,
    weights: Vec<Vec<f64>>,
    /// Row-major `k × k` lower Cholesky factor of the remainder covariance.
    residual: Vec<f64>,
}

fn quad_checked<F: Fn(f64, f64, f64) -> Result<f64>>(f: F, a: f64, b: f64) -> Result<f64> {
    let fail = std::cell::Cell::new(None);
    let v = tanh_sinh(
        |x, from_a, to_b| {
            f(x, from_a, to_b).unwrap_or_else(|e| {
                fail.set(Some(e));
                0.0
            })
        },
        a,
        b,
        1e-10,
    )?;
    match fail.into_inner() {
        Some(e) => Err(e),
        None => Ok(v),
    }
}

impl FbmSynthesizer {
    pub fn new(kernel: &FbmKernel, grid: &TimeGrid, nodes: &[usize]) -> Result<Self> {
        check_nodes(nodes, grid)?;
        if nodes.contains(&0) {
            return Err(Error::domain("fBm synthesis needs positive observation times"));
        }
        let delta = grid.delta();
        let weights = nodes
            .par_iter()
            .map(|&j| {
                let t = grid.node(j);
                (0..j)
                    .map(|i| {
                        if kernel.is_brownian() {
                            return Ok(1.0);
                        }
                        let lo = grid.node(i);
                        let last = i + 1 == j;
                        let hi = if last { t } else { grid.node(i + 1) };
                        let v = quad_checked(
                            |s, from_lo, to_hi| {
                                let gap = if last { to_hi } else { t - s };
                                let s = if i == 0 { from_lo } else { s };
                                kernel.eval_with_gap(t, s, gap)
                            },
                            lo,
                            hi,
                        )?;
                        Ok(v / delta)
                    })
                    .collect::<Result<Vec<f64>>>()
            })
            .collect::<Result<Vec<_>>>()?;

        let k = nodes.len();
        let mut cov = vec![0.0; k * k];
        for a in 0..k {
            for b in 0..=a {
                let (ta, tb) = (grid.node(nodes[a]), grid.node(nodes[b]));
                let (hi, lo_t) = if ta >= tb { (ta, tb) } else { (tb, ta) };
                let full = if kernel.is_brownian() {
                    lo_t
                } else if ta == tb {
                    kernel.l2_mass(ta)?
                } else {
                    quad_checked(
                        |s, from_lo, to_end| {
                            Ok(kernel.eval_with_gap(hi, from_lo, hi - s)? * kernel.eval_with_gap(lo_t, from_lo, to_end)?)
                        },
                        0.0,
                        lo_t,
                    )?
                };
                let len = weights[a].len().min(weights[b].len());
                let projected = dot(&weights[a][..len], &weights[b][..len]) * delta;
                cov[a * k + b] = full - projected;
                cov[b * k + a] = full - projected;
            }
        }
        Ok(Self { grid: *grid, nodes: nodes.to_vec(), weights, residual: cholesky_psd(&cov, k) })
    }

    /// Covariance of the projected part `Σ_i k̄_i ΔB_i` at observation indices `a`, `b`.
    pub fn grid_covariance(&self, a: usize, b: usize) -> f64 {
        let (wa, wb) = (&self.weights[a], &self.weights[b]);
        let len = wa.len().min(wb.len());
        dot(&wa[..len], &wb[..len]) * self.grid.delta()
    }

    /// Covariance of the synthesized values, projection plus remainder.
    pub fn covariance(&self, a: usize, b: usize) -> f64 {
        let k = self.nodes.len();
        let rem: f64 = (0..=a.min(b)).map(|c| self.residual[a * k + c] * self.residual[b * k + c]).sum();
        self.grid_covariance(a, b) + rem
    }

    pub fn nodes(&self) -> &[usize] {
        &self.nodes
    }

    pub fn simulate(&self, batch: &BrownianBatch) -> Result<PathEnsemble> {
        batch.check_grid(&self.grid)?;
        let k = self.nodes.len();
        let values = run_paths(batch.paths(), k, self.grid.len(), |m, ws, out| {
            batch.fill(m, &mut ws.db);
            let normals = &mut ws.u[..k];
            batch.fill_auxiliary(m, FBM_RESIDUAL_SALT, normals);
            for (a, (o, w)) in out.iter_mut().zip(&self.weights).enumerate() {
                let rem: f64 = (0..=a).map(|c| self.residual[a * k + c] * normals[c]).sum();
                *o = dot(w, &ws.db[..w.len()]) + rem;
            }
            Ok(())
        })?;
        Ok(ensemble(Process::Fbm, self.grid, None, "fbm", batch, &self.nodes, values))
    }
}

/// Lower Cholesky factor of a symmetric positive semi-definite matrix;
/// pivots that rounding pushes to zero or below give zero columns.
fn cholesky_psd(a: &[f64], k: usize) -> Vec<f64> {
    let mut l = vec![0.0f64; k * k];
    let scale = (0..k).map(|i| a[i * k + i].abs()).fold(0.0, f64::max);
    for j in 0..k {
        let d = a[j * k + j] - (0..j).map(|c| l[j * k + c].powi(2)).sum::<f64>();
        if d <= 1e-14 * scale {
            continue;
        }
        let pivot = d.sqrt();
        l[j * k + j] = pivot;
        for i in (j + 1)..k {
            let s = a[i * k + j] - (0..j).map(|c| l[i * k + c] * l[j * k + c]).sum::<f64>();
            l[i * k + j] = s / pivot;
        }
    }
    l
}
