//! Gauss hypergeometric function on the negative real axis.
//!
//! Only `z <= 0` is needed: the fBm kernel evaluates `₂F₁` at `1 - t/s` with
//! `0 < s < t`. The Pfaff transformation
//!
//! ```text
//! ₂F₁(a, b; c; z) = (1 - z)^(-a) ₂F₁(a, c - b; c; w),   w = z / (z - 1) ∈ [0, 1)
//! ```
//!
//! maps every such argument into the unit interval where the Maclaurin series
//! converges geometrically. When `w` gets close to 1 (i.e. `s ≪ t`) the series
//! needs tens of thousands of terms, so past [`SERIES_SWITCH`] the `1 - w`
//! connection formula takes over, provided `c - a - b` is not close to an
//! integer.

use statrs::function::gamma::gamma;

use crate::error::{Error, Result};

/// Hard cap on the number of series terms.
pub const MAX_TERMS: usize = 100_000;

/// Above this value of the transformed argument the connection formula is used.
pub const SERIES_SWITCH: f64 = 0.9;

const REL_STOP: f64 = 1e-16;

/// `₂F₁(a, b; c; z)` for `z <= 0`.
pub fn hyp2f1(a: f64, b: f64, c: f64, z: f64) -> Result<f64> {
    if !(a.is_finite() && b.is_finite() && c.is_finite() && z.is_finite()) {
        return Err(Error::domain(format!(
            "hyp2f1 arguments must be finite, got ({a}, {b}, {c}, {z})"
        )));
    }
    if c <= 0.0 && c == c.round() {
        return Err(Error::domain(format!(
            "hyp2f1: c = {c} is a non-positive integer"
        )));
    }
    if z > 0.0 {
        return Err(Error::domain(format!("hyp2f1 requires z <= 0, got {z}")));
    }
    let one_minus_z = 1.0 - z;
    let w = -z / one_minus_z;
    let wc = 1.0 / one_minus_z;
    let prefactor = one_minus_z.powf(-a);
    Ok(prefactor * f21_unit(a, c - b, c, w, wc).map_err(|e| tag(e, a, b, c, z))?)
}

fn tag(e: Error, a: f64, b: f64, c: f64, z: f64) -> Error {
    match e {
        Error::NumericalFailure { routine, detail } => Error::NumericalFailure {
            routine,
            detail: format!("{detail} at (a, b, c, z) = ({a}, {b}, {c}, {z})"),
        },
        other => other,
    }
}

/// `₂F₁(a, b; c; w)` for `w ∈ [0, 1)`, with `wc = 1 - w` supplied by the caller
/// so that it keeps full relative precision when `w` is close to 1.
pub(crate) fn f21_unit(a: f64, b: f64, c: f64, w: f64, wc: f64) -> Result<f64> {
    debug_assert!((0.0..=1.0).contains(&w) && wc > 0.0, "series argument {w} outside [0, 1)");
    let gap = c - a - b;
    if w > SERIES_SWITCH && (gap - gap.round()).abs() > 1e-3 && !is_terminating(a, b) {
        return connection(a, b, c, wc);
    }
    maclaurin(a, b, c, w)
}

fn is_terminating(a: f64, b: f64) -> bool {
    (a <= 0.0 && a == a.round()) || (b <= 0.0 && b == b.round())
}

fn maclaurin(a: f64, b: f64, c: f64, w: f64) -> Result<f64> {
    let mut sum = 1.0;
    let mut term = 1.0;
    for n in 0..MAX_TERMS {
        let nf = n as f64;
        term *= (a + nf) * (b + nf) / ((c + nf) * (nf + 1.0)) * w;
        sum += term;
        if term == 0.0 || term.abs() < REL_STOP * sum.abs() {
            return Ok(sum);
        }
    }
    Err(Error::NumericalFailure {
        routine: "hyp2f1",
        detail: format!("series did not converge in {MAX_TERMS} terms (w = {w})"),
    })
}

// ₂F₁(a,b;c;w) = A ₂F₁(a, b; a+b-c+1; 1-w) + B (1-w)^(c-a-b) ₂F₁(c-a, c-b; c-a-b+1; 1-w)
fn connection(a: f64, b: f64, c: f64, wc: f64) -> Result<f64> {
    let gap = c - a - b;
    let first = gamma(c) * gamma(gap) / (gamma(c - a) * gamma(c - b));
    let second = gamma(c) * gamma(-gap) / (gamma(a) * gamma(b));
    let f1 = maclaurin(a, b, 1.0 - gap, wc)?;
    let f2 = maclaurin(c - a, c - b, 1.0 + gap, wc)?;
    Ok(first * f1 + second * wc.powf(gap) * f2)
}

/// Euler beta function for positive arguments.
pub fn beta(a: f64, b: f64) -> f64 {
    statrs::function::beta::beta(a, b)
}

pub use statrs::function::gamma::gamma as gamma_fn;
