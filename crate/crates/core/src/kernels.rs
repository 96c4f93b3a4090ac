//! Coefficient functions `b(t, s, x)`, `σ(t, s, x)` and the fractional
//! Brownian motion kernel.
//!
//! Every coefficient is a product of a time kernel `k(t, s)` and a state map
//! `f(x)`. The simulators rely on this factorisation: kernel values are
//! tabulated once per grid and each path only evaluates `f` along its own
//! history (see [`crate::tables`]).

use std::f64::consts::PI;
use std::fmt;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::quadrature::{gauss_kronrod, tanh_sinh};
use crate::special::{beta, f21_unit, gamma_fn};

/// Distance from 1/2 within which `H` is treated as the Brownian case.
pub const BROWNIAN_TOL: f64 = 1e-6;

/// The fBm kernel `K_H(t, s)` together with its normalising constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FbmKernel {
    hurst: f64,
    /// `c_H`, defined for `H > 1/2` only.
    c_h: Option<f64>,
    /// `V_H`; equal to 1 in the Brownian case.
    v_h: f64,
    norm: f64,
}

impl FbmKernel {
    pub fn new(hurst: f64) -> Result<Self> {
        if !(hurst > 0.0 && hurst < 1.0) {
            return Err(Error::domain(format!("Hurst index must lie in (0, 1), got {hurst}")));
        }
        if (hurst - 0.5).abs() <= BROWNIAN_TOL {
            return Ok(Self { hurst, c_h: None, v_h: 1.0, norm: 1.0 });
        }
        let v_h = gamma_fn(2.0 - 2.0 * hurst) * (PI * hurst).cos()
            / (PI * hurst * (1.0 - 2.0 * hurst));
        let c_h = (hurst > 0.5)
            .then(|| (hurst * (2.0 * hurst - 1.0) / beta(2.0 - 2.0 * hurst, hurst - 0.5)).sqrt());
        let norm = 1.0 / (gamma_fn(hurst + 0.5) * v_h.sqrt());
        Ok(Self { hurst, c_h, v_h, norm })
    }

    pub fn hurst(&self) -> f64 {
        self.hurst
    }

    pub fn c_h(&self) -> Option<f64> {
        self.c_h
    }

    pub fn v_h(&self) -> f64 {
        self.v_h
    }

    pub fn is_brownian(&self) -> bool {
        (self.hurst - 0.5).abs() <= BROWNIAN_TOL
    }

    /// `K_H(t, s)` for `0 < s < t`, via the hypergeometric representation.
    pub fn eval(&self, t: f64, s: f64) -> Result<f64> {
        if !(s > 0.0 && s < t) {
            return Err(Error::domain(format!("K_H(t, s) needs 0 < s < t, got t = {t}, s = {s}")));
        }
        self.eval_with_gap(t, s, t - s)
    }

    /// As [`eval`](Self::eval) with `gap = t - s` supplied by the caller, which
    /// keeps relative precision when `s` is within rounding of `t`.
    pub fn eval_with_gap(&self, t: f64, s: f64, gap: f64) -> Result<f64> {
        if !(s > 0.0 && gap > 0.0) {
            return Err(Error::domain(format!("K_H(t, s) needs 0 < s < t, got t = {t}, s = {s}")));
        }
        if self.is_brownian() {
            return Ok(1.0);
        }
        let h = self.hurst;
        // Pfaff: F(h-1/2, 1/2-h; h+1/2; 1-t/s) = (t/s)^(1/2-h) F(h-1/2, 2h; h+1/2; gap/t)
        let f = f21_unit(h - 0.5, 2.0 * h, h + 0.5, gap / t, s / t)?;
        Ok(self.norm * gap.powf(h - 0.5) * (t / s).powf(0.5 - h) * f)
    }

    /// `K_H(t, s)` through `c_H s^(1/2-H) ∫_s^t (u-s)^(H-3/2) u^(H-1/2) du`,
    /// available for `H > 1/2`.
    ///
    /// The substitution `u = s + v^(1/(H-1/2))` removes the endpoint
    /// singularity; the transformed integrand is `u^(H-1/2) / (H-1/2)` on
    /// `v ∈ [0, (t-s)^(H-1/2)]`.
    pub fn eval_integral(&self, t: f64, s: f64) -> Result<f64> {
        let c_h = self.c_h.ok_or_else(|| {
            Error::domain(format!("integral form needs H > 1/2, got {}", self.hurst))
        })?;
        if !(s > 0.0 && s < t) {
            return Err(Error::domain(format!("K_H(t, s) needs 0 < s < t, got t = {t}, s = {s}")));
        }
        let q = self.hurst - 0.5;
        let upper = (t - s).powf(q);
        let inner = gauss_kronrod(|v| (s + v.powf(1.0 / q)).powf(q) / q, 0.0, upper, 1e-12)?;
        Ok(c_h * s.powf(-q) * inner)
    }

    /// `∫₀ᵗ K_H(t, s)² ds`.
    pub fn l2_mass(&self, t: f64) -> Result<f64> {
        if !(t > 0.0 && t.is_finite()) {
            return Err(Error::domain(format!("l2_mass needs t > 0, got {t}")));
        }
        if self.is_brownian() {
            return Ok(t);
        }
        let failure = std::cell::Cell::new(None);
        let value = tanh_sinh(
            |_, s, gap| match self.eval_with_gap(t, s, gap) {
                Ok(k) => k * k,
                Err(e) => {
                    failure.set(Some(e));
                    0.0
                }
            },
            0.0,
            t,
            1e-10,
        )?;
        match failure.into_inner() {
            Some(e) => Err(e),
            None => Ok(value),
        }
    }
}

/// `R_H(t, s) = ½ (t^{2H} + s^{2H} - |t - s|^{2H})`.
pub fn fbm_covariance(hurst: f64, t: f64, s: f64) -> f64 {
    let e = 2.0 * hurst;
    0.5 * (t.powf(e) + s.powf(e) - (t - s).abs().powf(e))
}

/// Time-dependence `k(t, s)` of a coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum TimeKernel {
    Constant(f64),
    /// `amplitude · exp(-rate (t - s))`.
    Exponential { amplitude: f64, rate: f64 },
    /// `scale · K_H(t, s)`.
    Fbm { kernel: FbmKernel, scale: f64 },
}

impl TimeKernel {
    pub fn try_value(&self, t: f64, s: f64) -> Result<f64> {
        match *self {
            TimeKernel::Constant(c) => Ok(c),
            TimeKernel::Exponential { amplitude, rate } => Ok(amplitude * (-rate * (t - s)).exp()),
            TimeKernel::Fbm { kernel, scale } => Ok(scale * kernel.eval(t, s)?),
        }
    }

    /// `k(t, s)`, or NaN outside the kernel's domain.
    pub fn value(&self, t: f64, s: f64) -> f64 {
        self.try_value(t, s).unwrap_or(f64::NAN)
    }

    /// True when `k(t, s)` is the same function for both kernels.
    pub fn same_as(&self, other: &TimeKernel) -> bool {
        self == other
    }
}

/// State dependence `f(x)` of a coefficient, with two derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum StateMap {
    Constant(f64),
    /// `slope · x`
    Linear(f64),
    Sine,
    Cosine,
}

impl StateMap {
    pub fn value(&self, x: f64) -> f64 {
        match *self {
            StateMap::Constant(c) => c,
            StateMap::Linear(a) => a * x,
            StateMap::Sine => x.sin(),
            StateMap::Cosine => x.cos(),
        }
    }

    pub fn d1(&self, x: f64) -> f64 {
        match *self {
            StateMap::Constant(_) => 0.0,
            StateMap::Linear(a) => a,
            StateMap::Sine => x.cos(),
            StateMap::Cosine => -x.sin(),
        }
    }

    pub fn d2(&self, x: f64) -> f64 {
        match *self {
            StateMap::Constant(_) | StateMap::Linear(_) => 0.0,
            StateMap::Sine => -x.sin(),
            StateMap::Cosine => -x.cos(),
        }
    }

    /// `(f(x + ε u) - f(x)) / ε` without the cancellation of the naive form.
    pub fn difference_quotient(&self, x: f64, eps: f64, u: f64) -> f64 {
        match *self {
            StateMap::Constant(_) => 0.0,
            StateMap::Linear(a) => a * u,
            StateMap::Sine => {
                let h = 0.5 * eps * u;
                2.0 * (x + h).cos() * h.sin() / eps
            }
            StateMap::Cosine => {
                let h = 0.5 * eps * u;
                -2.0 * (x + h).sin() * h.sin() / eps
            }
        }
    }

    /// Sup of |f'| and |f''| over the real line.
    fn derivative_sups(&self) -> (f64, f64) {
        match *self {
            StateMap::Constant(_) => (0.0, 0.0),
            StateMap::Linear(a) => (a.abs(), 0.0),
            StateMap::Sine | StateMap::Cosine => (1.0, 1.0),
        }
    }

    fn is_zero(&self) -> bool {
        matches!(self, StateMap::Constant(c) if *c == 0.0) || matches!(self, StateMap::Linear(a) if *a == 0.0)
    }
}

/// One coefficient `k(t, s) · f(x)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Term {
    pub kernel: TimeKernel,
    pub map: StateMap,
}

impl Term {
    pub fn new(kernel: TimeKernel, map: StateMap) -> Self {
        Self { kernel, map }
    }

    pub fn zero() -> Self {
        Self::new(TimeKernel::Constant(1.0), StateMap::Constant(0.0))
    }

    pub fn is_zero(&self) -> bool {
        self.map.is_zero() || self.kernel == TimeKernel::Constant(0.0)
    }
}

/// Built-in coefficient presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Preset {
    AdditiveUnit,
    Multiplicative,
    LinearGrowth,
    Trig,
    FbmTrig,
    FbmAdditive,
}

impl Preset {
    pub const ALL: [Preset; 6] = [
        Preset::AdditiveUnit,
        Preset::Multiplicative,
        Preset::LinearGrowth,
        Preset::Trig,
        Preset::FbmTrig,
        Preset::FbmAdditive,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Preset::AdditiveUnit => "additive-unit",
            Preset::Multiplicative => "multiplicative",
            Preset::LinearGrowth => "linear-growth",
            Preset::Trig => "trig",
            Preset::FbmTrig => "fbm-trig",
            Preset::FbmAdditive => "fbm-additive",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == name)
    }

    pub fn is_fbm(&self) -> bool {
        matches!(self, Preset::FbmTrig | Preset::FbmAdditive)
    }

    /// Parameter names and defaults.
    pub fn parameters(&self) -> &'static [(&'static str, f64)] {
        match self {
            Preset::AdditiveUnit | Preset::Multiplicative => &[],
            Preset::LinearGrowth => &[("a", 1.0)],
            Preset::Trig => &[("amplitude", 1.0), ("rate", 1.0)],
            Preset::FbmTrig => &[("scale", 1.0)],
            Preset::FbmAdditive => &[("sigma0", 1.0)],
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// The coefficients `b`, `σ` of the equation and their `x`-derivatives.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoefficientSet {
    pub name: String,
    pub params: Vec<f64>,
    pub drift: Term,
    pub diffusion: Term,
}

impl CoefficientSet {
    pub fn new(name: impl Into<String>, drift: Term, diffusion: Term) -> Self {
        Self { name: name.into(), params: Vec::new(), drift, diffusion }
    }

    /// Builds a preset. Missing trailing parameters take their defaults;
    /// `hurst` is required exactly for the fBm presets.
    pub fn preset(preset: Preset, params: &[f64], hurst: Option<f64>) -> Result<Self> {
        let declared = preset.parameters();
        if params.len() > declared.len() {
            return Err(Error::domain(format!(
                "preset {preset} takes {} parameter(s), got {}",
                declared.len(),
                params.len()
            )));
        }
        if let Some(bad) = params.iter().find(|p| !p.is_finite()) {
            return Err(Error::domain(format!("preset parameter {bad} is not finite")));
        }
        let p: Vec<f64> = declared
            .iter()
            .enumerate()
            .map(|(i, &(_, default))| params.get(i).copied().unwrap_or(default))
            .collect();
        let fbm = match (preset.is_fbm(), hurst) {
            (true, Some(h)) => Some(FbmKernel::new(h)?),
            (true, None) => {
                return Err(Error::domain(format!("preset {preset} needs a Hurst index")))
            }
            (false, Some(_)) => {
                return Err(Error::domain(format!("preset {preset} does not take a Hurst index")))
            }
            (false, None) => None,
        };
        let unit = TimeKernel::Constant(1.0);
        let (drift, diffusion) = match preset {
            Preset::AdditiveUnit => (Term::zero(), Term::new(unit, StateMap::Constant(1.0))),
            Preset::Multiplicative => (Term::zero(), Term::new(unit, StateMap::Linear(1.0))),
            Preset::LinearGrowth => (
                Term::new(unit, StateMap::Linear(p[0])),
                Term::new(unit, StateMap::Constant(1.0)),
            ),
            Preset::Trig => {
                let k = TimeKernel::Exponential { amplitude: p[0], rate: p[1] };
                (Term::new(k, StateMap::Sine), Term::new(k, StateMap::Cosine))
            }
            Preset::FbmTrig => {
                let k = TimeKernel::Fbm { kernel: fbm.unwrap(), scale: p[0] };
                (Term::new(k, StateMap::Sine), Term::new(k, StateMap::Cosine))
            }
            Preset::FbmAdditive => {
                let k = TimeKernel::Fbm { kernel: fbm.unwrap(), scale: 1.0 };
                (Term::zero(), Term::new(k, StateMap::Constant(p[0])))
            }
        };
        Ok(Self { name: preset.name().to_string(), params: p, drift, diffusion })
    }

    pub fn b(&self, t: f64, s: f64, x: f64) -> f64 {
        self.drift.kernel.value(t, s) * self.drift.map.value(x)
    }

    pub fn sigma(&self, t: f64, s: f64, x: f64) -> f64 {
        self.diffusion.kernel.value(t, s) * self.diffusion.map.value(x)
    }

    pub fn db(&self, t: f64, s: f64, x: f64) -> f64 {
        self.drift.kernel.value(t, s) * self.drift.map.d1(x)
    }

    pub fn dsigma(&self, t: f64, s: f64, x: f64) -> f64 {
        self.diffusion.kernel.value(t, s) * self.diffusion.map.d1(x)
    }

    pub fn d2b(&self, t: f64, s: f64, x: f64) -> f64 {
        self.drift.kernel.value(t, s) * self.drift.map.d2(x)
    }

    pub fn d2sigma(&self, t: f64, s: f64, x: f64) -> f64 {
        self.diffusion.kernel.value(t, s) * self.diffusion.map.d2(x)
    }

    /// The fBm kernel used by this set, if any.
    pub fn fbm_kernel(&self) -> Option<FbmKernel> {
        [self.drift.kernel, self.diffusion.kernel].into_iter().find_map(|k| match k {
            TimeKernel::Fbm { kernel, .. } => Some(kernel),
            _ => None,
        })
    }

    /// Bounds `k₁`, `k₂`, `k₃` implied by the kernels and state maps.
    ///
    /// `|f(x)| ≤ |f(0)| + sup|f'| |x|` gives the linear growth bound. The
    /// integrability constant `L` is the grid maximum of the two integrals
    /// with 10% headroom.
    pub fn declared_bounds(&self, grid: &TimeGrid) -> AssumptionBounds {
        let growth = |m: &StateMap| -> f64 {
            let (d1, _) = m.derivative_sups();
            m.value(0.0).abs().max(d1)
        };
        let drift_k = self.drift.kernel;
        let diff_k = self.diffusion.kernel;
        let (b1, b2) = self.drift.map.derivative_sups();
        let (s1, s2) = self.diffusion.map.derivative_sups();
        let mut bounds = AssumptionBounds {
            k1: BoundKernel::Sum(drift_k, growth(&self.drift.map), diff_k, growth(&self.diffusion.map)),
            k2: BoundKernel::Sum(drift_k, b1, diff_k, s1),
            k3: BoundKernel::Sum(drift_k, b2, diff_k, s2),
            alpha: 1.1,
            beta: 1.1,
            gamma: 1.1,
            l: f64::INFINITY,
        };
        let (first, second) = bounds.integrals(grid);
        bounds.l = 1.1 * first.max(second).max(1e-12);
        bounds
    }
}

/// A non-negative bound `w₁|k₁(t,s)| + w₂|k₂(t,s)|`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum BoundKernel {
    Sum(TimeKernel, f64, TimeKernel, f64),
}

impl BoundKernel {
    pub fn constant(c: f64) -> Self {
        BoundKernel::Sum(TimeKernel::Constant(c), 1.0, TimeKernel::Constant(0.0), 0.0)
    }

    pub fn value(&self, t: f64, s: f64) -> f64 {
        let BoundKernel::Sum(k1, w1, k2, w2) = self;
        let part = |k: &TimeKernel, w: f64| if w == 0.0 { 0.0 } else { w * k.value(t, s).abs() };
        part(k1, *w1) + part(k2, *w2)
    }
}

/// Integrability data `k₁, k₂, k₃, α, β, γ, L`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AssumptionBounds {
    pub k1: BoundKernel,
    pub k2: BoundKernel,
    pub k3: BoundKernel,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub l: f64,
}

impl AssumptionBounds {
    /// Grid maxima of `∫₀ᵗ (k₁^{2α} + k₂^{2β}) ds` and `∫₀ᵗ k₃^{2γ} ds`
    /// (midpoint rule).
    pub fn integrals(&self, grid: &TimeGrid) -> (f64, f64) {
        let delta = grid.delta();
        let mut first: f64 = 0.0;
        let mut second: f64 = 0.0;
        for j in 1..grid.len() {
            let t = grid.node(j);
            let (mut a, mut b) = (0.0, 0.0);
            for i in 0..j {
                let s = grid.midpoint(i);
                a += (self.k1.value(t, s).powf(2.0 * self.alpha)
                    + self.k2.value(t, s).powf(2.0 * self.beta))
                    * delta;
                b += self.k3.value(t, s).powf(2.0 * self.gamma) * delta;
            }
            first = first.max(a);
            second = second.max(b);
        }
        (first, second)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ViolationKind {
    LinearGrowth,
    FirstDerivative,
    SecondDerivative,
    Integrability,
    Exponent,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub t: f64,
    pub s: f64,
    pub x: f64,
    pub observed: f64,
    pub bound: f64,
}

/// Outcome of [`check_assumptions`]; advisory only.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct AssumptionReport {
    pub checked_points: usize,
    pub violations: Vec<Violation>,
}

impl AssumptionReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Spot-checks linear growth, derivative bounds and integrability of the
/// bounds on grid pairs `(t_j, s_i*)` and the supplied probe states.
pub fn check_assumptions(
    c: &CoefficientSet,
    bounds: &AssumptionBounds,
    grid: &TimeGrid,
    probe_xs: &[f64],
) -> AssumptionReport {
    let mut report = AssumptionReport::default();
    let slack = |bound: f64| bound * (1.0 + 1e-12) + 1e-300;
    for exponent in [bounds.alpha, bounds.beta, bounds.gamma] {
        if !(exponent > 1.0) {
            report.violations.push(Violation {
                kind: ViolationKind::Exponent,
                t: f64::NAN,
                s: f64::NAN,
                x: f64::NAN,
                observed: exponent,
                bound: 1.0,
            });
        }
    }
    for j in 1..grid.len() {
        let t = grid.node(j);
        for i in 0..j {
            let s = grid.midpoint(i);
            for &x in probe_xs {
                report.checked_points += 1;
                let mut push = |kind, observed: f64, bound: f64| {
                    if !(observed <= slack(bound)) {
                        report.violations.push(Violation { kind, t, s, x, observed, bound });
                    }
                };
                push(
                    ViolationKind::LinearGrowth,
                    c.b(t, s, x).abs() + c.sigma(t, s, x).abs(),
                    bounds.k1.value(t, s) * (1.0 + x.abs()),
                );
                push(
                    ViolationKind::FirstDerivative,
                    c.db(t, s, x).abs() + c.dsigma(t, s, x).abs(),
                    bounds.k2.value(t, s),
                );
                push(
                    ViolationKind::SecondDerivative,
                    c.d2b(t, s, x).abs() + c.d2sigma(t, s, x).abs(),
                    bounds.k3.value(t, s),
                );
            }
        }
    }
    let (first, second) = bounds.integrals(grid);
    for value in [first, second] {
        if !(value <= slack(bounds.l)) {
            report.violations.push(Violation {
                kind: ViolationKind::Integrability,
                t: f64::NAN,
                s: f64::NAN,
                x: f64::NAN,
                observed: value,
                bound: bounds.l,
            });
        }
    }
    report
}

/// Largest normalised mismatch `|central difference - supplied| / (1 + |supplied|)`
/// over the supplied points, for all four derivatives. Step `1e-5`.
pub fn derivative_mismatch(c: &CoefficientSet, points: &[(f64, f64, f64)]) -> f64 {
    const H: f64 = 1e-5;
    let mut worst: f64 = 0.0;
    let central = |f: &dyn Fn(f64) -> f64, x: f64| (f(x + H) - f(x - H)) / (2.0 * H);
    for &(t, s, x) in points {
        let pairs: [(f64, f64); 4] = [
            (central(&|y| c.b(t, s, y), x), c.db(t, s, x)),
            (central(&|y| c.sigma(t, s, y), x), c.dsigma(t, s, x)),
            (central(&|y| c.db(t, s, y), x), c.d2b(t, s, x)),
            (central(&|y| c.dsigma(t, s, y), x), c.d2sigma(t, s, x)),
        ];
        for (fd, supplied) in pairs {
            worst = worst.max((fd - supplied).abs() / (1.0 + supplied.abs()));
        }
    }
    worst
}
