//! Numerical laboratory for small-noise stochastic Volterra equations
//!
//! ```text
//! X_t = x₀ + ∫₀ᵗ b(t, s, X_s) ds + ε ∫₀ᵗ σ(t, s, X_s) dB_s
//! ```
//!
//! The crate computes the deterministic limit `x`, simulates the fluctuation
//! `(X - x)/ε`, its Gaussian limit `Y` and the second-order correction `Z`,
//! and provides the estimators used to check the convergence rates of the
//! fluctuation and its first-order weak expansion.

pub mod deterministic;
pub mod error;
pub mod experiment;
pub mod grid;
pub mod kernels;
pub mod quadrature;
pub mod simulate;
pub mod special;
pub mod stats;
pub mod tables;

pub use error::{Error, Result};
pub use grid::TimeGrid;

#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/deterministic.md")]
    mod deterministic {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
    #[doc = include_str!("../../../book/src/fbm.md")]
    mod fbm {}
    #[doc = include_str!("../../../book/src/statistics.md")]
    mod statistics {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}
