//! Tabulated kernels and the discrete Volterra convolution.
//!
//! All recursions in the crate have the shape
//!
//! ```text
//! v_j = Σ_{i<j} k_b(t_j, s_i*) u_i + Σ_{i<j} k_σ(t_j, s_i*) w_i
//! ```
//!
//! with `s_i* = s_i + δ/2`. The kernel values depend only on the grid, so they
//! are computed once and stored row by row; each path then costs one or two
//! dot products per node. When drift and diffusion share a kernel the two
//! sums are fused into one.

use rayon::prelude::*;

use crate::error::Result;
use crate::grid::TimeGrid;
use crate::kernels::{CoefficientSet, TimeKernel};

/// Strictly lower-triangular `(N+1) × (N+1)` matrix, stored by rows: row `j`
/// holds the `j` entries with column index `i < j`.
#[derive(Debug, Clone, PartialEq)]
pub struct LowerTriangular {
    size: usize,
    data: Vec<f64>,
}

impl LowerTriangular {
    pub fn zeros(size: usize) -> Self {
        Self { size, data: vec![0.0; size * size.saturating_sub(1) / 2] }
    }

    /// Fills entry `(j, i)`, `i < j`, from `f(j, i)`, rows in parallel.
    pub fn try_from_fn<F>(size: usize, f: F) -> Result<Self>
    where
        F: Fn(usize, usize) -> Result<f64> + Sync,
    {
        let rows: Vec<Vec<f64>> = (0..size)
            .into_par_iter()
            .map(|j| (0..j).map(|i| f(j, i)).collect::<Result<Vec<f64>>>())
            .collect::<Result<_>>()?;
        Ok(Self { size, data: rows.concat() })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    #[inline]
    fn offset(j: usize) -> usize {
        j * j.saturating_sub(1) / 2
    }

    #[inline]
    pub fn row(&self, j: usize) -> &[f64] {
        let o = Self::offset(j);
        &self.data[o..o + j]
    }

    #[inline]
    pub fn row_mut(&mut self, j: usize) -> &mut [f64] {
        let o = Self::offset(j);
        &mut self.data[o..o + j]
    }

    /// Entry `(j, i)`; zero on and above the diagonal.
    #[inline]
    pub fn get(&self, j: usize, i: usize) -> f64 {
        if i < j {
            self.data[Self::offset(j) + i]
        } else {
            0.0
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }
}

/// Dot product with a fixed four-lane accumulation order. Every convolution
/// in the crate goes through here, so algebraically equal sums are also
/// bitwise equal.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let split = n - n % 4;
    let mut acc = [0.0f64; 4];
    for (ca, cb) in a[..split].chunks_exact(4).zip(b[..split].chunks_exact(4)) {
        acc[0] += ca[0] * cb[0];
        acc[1] += ca[1] * cb[1];
        acc[2] += ca[2] * cb[2];
        acc[3] += ca[3] * cb[3];
    }
    let mut tail = 0.0;
    for i in split..n {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + tail
}

/// Kernel values of a coefficient set on a grid.
#[derive(Debug, Clone)]
pub struct KernelTables {
    grid: TimeGrid,
    drift: LowerTriangular,
    /// `None` when the diffusion kernel equals the drift kernel.
    diffusion: Option<LowerTriangular>,
}

fn tabulate(kernel: &TimeKernel, grid: &TimeGrid) -> Result<LowerTriangular> {
    if let TimeKernel::Constant(c) = kernel {
        let mut m = LowerTriangular::zeros(grid.len());
        m.data.fill(*c);
        return Ok(m);
    }
    LowerTriangular::try_from_fn(grid.len(), |j, i| kernel.try_value(grid.node(j), grid.midpoint(i)))
}

impl KernelTables {
    pub fn new(c: &CoefficientSet, grid: &TimeGrid) -> Result<Self> {
        let drift = tabulate(&c.drift.kernel, grid)?;
        let diffusion = if c.diffusion.kernel.same_as(&c.drift.kernel) {
            None
        } else {
            Some(tabulate(&c.diffusion.kernel, grid)?)
        };
        Ok(Self { grid: *grid, drift, diffusion })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn drift(&self) -> &LowerTriangular {
        &self.drift
    }

    pub fn diffusion(&self) -> &LowerTriangular {
        self.diffusion.as_ref().unwrap_or(&self.drift)
    }

    pub fn shared(&self) -> bool {
        self.diffusion.is_none()
    }

    /// `Σ_{i<j} k_b(j,i) u_i + k_σ(j,i) w_i`. With a shared kernel `fused`
    /// must hold `u_i + w_i`; otherwise it is ignored.
    #[inline]
    pub fn convolve(&self, j: usize, u: &[f64], w: &[f64], fused: &[f64]) -> f64 {
        match &self.diffusion {
            None => dot(self.drift.row(j), &fused[..j]),
            Some(diffusion) => dot(self.drift.row(j), &u[..j]) + dot(diffusion.row(j), &w[..j]),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::Preset;

    #[test]
    fn packed_layout() {
        let m = LowerTriangular::try_from_fn(5, |j, i| Ok((10 * j + i) as f64)).unwrap();
        assert_eq!(m.row(0), &[] as &[f64]);
        assert_eq!(m.row(3), &[30.0, 31.0, 32.0]);
        assert_eq!(m.get(4, 2), 42.0);
        assert_eq!(m.get(2, 2), 0.0);
        assert_eq!(m.get(1, 3), 0.0);
        assert_eq!(m.values().len(), 10);
    }

    #[test]
    fn dot_matches_naive() {
        let a: Vec<f64> = (0..11).map(|i| i as f64 * 0.5).collect();
        let b: Vec<f64> = (0..11).map(|i| 1.0 - i as f64).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-12);
        assert_eq!(dot(&[], &[]), 0.0);
    }

    #[test]
    fn kernel_tables_share_when_possible() {
        let grid = TimeGrid::new(1.0, 8).unwrap();
        let trig = CoefficientSet::preset(Preset::Trig, &[], None).unwrap();
        let t = KernelTables::new(&trig, &grid).unwrap();
        assert!(t.shared());
        let expected = (-(grid.node(5) - grid.midpoint(2))).exp();
        assert!((t.drift().get(5, 2) - expected).abs() < 1e-15);

        let fbm = CoefficientSet::preset(Preset::FbmAdditive, &[], Some(0.7)).unwrap();
        let t = KernelTables::new(&fbm, &grid).unwrap();
        assert!(!t.shared());
        assert_eq!(t.drift().get(3, 1), 1.0);
        let k = fbm.fbm_kernel().unwrap().eval(grid.node(3), grid.midpoint(1)).unwrap();
        assert_eq!(t.diffusion().get(3, 1), k);
    }
}
