use serde::Serialize;

use crate::error::{Error, Result};

/// Largest number of steps accepted by [`TimeGrid::new`]. The derivative
/// field stores `O(N²)` entries and costs `O(N³)` to solve.
pub const MAX_STEPS: usize = 4096;

/// Uniform grid `t_j = j δ`, `j = 0..=N`, on `[0, T]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::domain(format!("horizon must be positive, got {horizon}")));
        }
        if steps < 2 {
            return Err(Error::domain(format!("need at least 2 steps, got {steps}")));
        }
        if steps > MAX_STEPS {
            return Err(Error::domain(format!(
                "{steps} steps exceeds the cap of {MAX_STEPS}"
            )));
        }
        Ok(Self { horizon, steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Number of steps `N`.
    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Number of nodes, `N + 1`.
    pub fn len(&self) -> usize {
        self.steps + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn delta(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    /// Node `t_j`. The last node is exactly `T`.
    pub fn node(&self, j: usize) -> f64 {
        if j == self.steps {
            self.horizon
        } else {
            j as f64 * self.delta()
        }
    }

    /// Cell midpoint `s_i + δ/2`, where kernels are evaluated in their second argument.
    pub fn midpoint(&self, i: usize) -> f64 {
        (i as f64 + 0.5) * self.delta()
    }

    pub fn nodes(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.len()).map(|j| self.node(j))
    }

    /// Index of the node equal to `t` (within `1e-9 δ`), if any.
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let x = t / self.delta();
        let j = x.round();
        if j < 0.0 || j > self.steps as f64 || (x - j).abs() > 1e-9 {
            return None;
        }
        Some(j as usize)
    }
}
