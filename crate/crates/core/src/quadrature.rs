//! One-dimensional quadrature used by the kernel routines.
//!
//! Two independent rules are provided: double-exponential (tanh-sinh) for
//! integrands with algebraic endpoint singularities, and adaptive
//! Gauss–Kronrod (7/15) for smooth integrands.

use std::f64::consts::FRAC_PI_2;

use crate::error::{Error, Result};

const TS_MAX_LEVEL: usize = 12;
// Wide enough that the truncated tails of `x^(-0.8)`-type singularities stay below 1e-12.
const TS_T_MAX: f64 = 5.5;

/// Tanh-sinh quadrature of `f` over `[a, b]`.
///
/// The integrand receives `(x, x - a, b - x)`; the two distances are computed
/// from the transformation itself and keep full relative precision close to
/// the endpoints, which matters for integrands like `(b - x)^(-0.4)`.
pub fn tanh_sinh<F>(f: F, a: f64, b: f64, rel_tol: f64) -> Result<f64>
where
    F: Fn(f64, f64, f64) -> f64,
{
    if !(b > a) {
        return Err(Error::domain(format!("tanh_sinh: empty interval [{a}, {b}]")));
    }
    let half = 0.5 * (b - a);
    let len = b - a;
    let eval = |t: f64| -> f64 {
        let u = FRAC_PI_2 * t.sinh();
        let cosh_u = u.cosh();
        let w = half * FRAC_PI_2 * t.cosh() / (cosh_u * cosh_u);
        if w == 0.0 || !w.is_finite() {
            return 0.0;
        }
        let to_b = len / (1.0 + (2.0 * u).exp());
        let to_a = len / (1.0 + (-2.0 * u).exp());
        if to_a <= 0.0 || to_b <= 0.0 {
            return 0.0;
        }
        let x = if to_a < to_b { a + to_a } else { b - to_b };
        w * f(x, to_a, to_b)
    };

    let mut h = 1.0;
    let mut sum = eval(0.0);
    let mut k = 1.0;
    while k * h <= TS_T_MAX {
        sum += eval(k * h) + eval(-k * h);
        k += 1.0;
    }
    let mut estimate = h * sum;
    for level in 1..=TS_MAX_LEVEL {
        h *= 0.5;
        let mut t = h;
        while t <= TS_T_MAX {
            sum += eval(t) + eval(-t);
            t += 2.0 * h;
        }
        let next = h * sum;
        if !next.is_finite() {
            return Err(Error::NumericalFailure {
                routine: "tanh_sinh",
                detail: format!("non-finite estimate at level {level}"),
            });
        }
        let converged = (next - estimate).abs() <= rel_tol * next.abs();
        estimate = next;
        if level >= 3 && converged {
            return Ok(estimate);
        }
    }
    Err(Error::NumericalFailure {
        routine: "tanh_sinh",
        detail: format!("no convergence to {rel_tol:e} after {TS_MAX_LEVEL} levels"),
    })
}

// Gauss–Kronrod 7/15 nodes and weights on [-1, 1].
const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kronrod = WGK[7] * fc;
    let mut gauss = WG[3] * fc;
    for j in 0..7 {
        let dx = h * XGK[j];
        let pair = f(c - dx) + f(c + dx);
        kronrod += WGK[j] * pair;
        if j % 2 == 1 {
            gauss += WG[j / 2] * pair;
        }
    }
    (kronrod * h, ((kronrod - gauss) * h).abs())
}

/// Adaptive Gauss–Kronrod quadrature of a smooth integrand over `[a, b]`.
pub fn gauss_kronrod<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, rel_tol: f64) -> Result<f64> {
    if a == b {
        return Ok(0.0);
    }
    let (whole, err) = gk15(&f, a, b);
    let mut stack = vec![(a, b, whole, err)];
    let mut total = 0.0;
    let mut evaluations = 0usize;
    let target = rel_tol * whole.abs().max(f64::MIN_POSITIVE);
    while let Some((lo, hi, value, err)) = stack.pop() {
        let width_fraction = (hi - lo) / (b - a);
        if err <= target * width_fraction.max(1e-3) || hi - lo < 1e-14 * (b - a).abs() {
            total += value;
            continue;
        }
        evaluations += 1;
        if evaluations > 50_000 {
            return Err(Error::NumericalFailure {
                routine: "gauss_kronrod",
                detail: format!("subdivision limit reached on [{a}, {b}]"),
            });
        }
        let mid = 0.5 * (lo + hi);
        let (l, le) = gk15(&f, lo, mid);
        let (r, re) = gk15(&f, mid, hi);
        stack.push((lo, mid, l, le));
        stack.push((mid, hi, r, re));
    }
    if !total.is_finite() {
        return Err(Error::NumericalFailure {
            routine: "gauss_kronrod",
            detail: "non-finite result".into(),
        });
    }
    Ok(total)
}
