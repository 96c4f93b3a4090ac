//! Independent numerical oracles shared by the integration tests.
#![allow(dead_code)]

mod hermite;

#[allow(unused_imports)]
pub use hermite::{gauss_hermite, normal_expectation};

pub fn normal_cdf(x: f64) -> f64 {
    use statrs::distribution::{ContinuousCDF, Normal};
    Normal::new(0.0, 1.0).unwrap().cdf(x)
}

/// Composite Simpson rule with `n` (even) panels.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

/// `₂F₁(a, b; c; z)` from Euler's integral, valid for `c > b > 0` and `z < 1`:
/// `Γ(c)/(Γ(b)Γ(c-b)) ∫₀¹ u^{b-1} (1-u)^{c-b-1} (1-zu)^{-a} du`.
/// Both endpoint singularities are removed by power substitutions.
pub fn hyp2f1_euler(a: f64, b: f64, c: f64, z: f64) -> f64 {
    use statrs::function::gamma::gamma;
    let g = |u: f64| (1.0 - z * u).powf(-a);
    let p = c - b;
    // [0, 1/2]: u = v^{1/b};  [1/2, 1]: 1 - u = v^{1/p}
    let left = simpson(|v| g(v.powf(1.0 / b)) * (1.0 - v.powf(1.0 / b)).powf(p - 1.0) / b, 0.0, 0.5f64.powf(b), 20_000);
    let right = simpson(|v| g(1.0 - v.powf(1.0 / p)) * (1.0 - v.powf(1.0 / p)).powf(b - 1.0) / p, 0.0, 0.5f64.powf(p), 20_000);
    gamma(c) / (gamma(b) * gamma(p)) * (left + right)
}

/// Sample mean and standard error.
pub fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

#[test]
fn gauss_hermite_moments() {
    assert!((normal_expectation(1.0, |x| x * x) - 1.0).abs() < 1e-12);
    assert!((normal_expectation(2.0, |x| x.powi(4)) - 48.0).abs() < 1e-9);
    assert!((normal_expectation(1.0, |x| x.cos()) - (-0.5f64).exp()).abs() < 1e-12);
}
