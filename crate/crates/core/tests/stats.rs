mod common;

use common::{normal_cdf, normal_expectation};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use voltfluct::deterministic::{solve_derivative_field, solve_deterministic_limit, variance_of_y, Discretization};
use voltfluct::kernels::{CoefficientSet, Preset};
use voltfluct::simulate::{all_nodes, sample_brownian, simulate_coupled, simulate_dz_terminal, simulate_y_euler, CoupledRequest};
use voltfluct::stats::{
    distance_report, freedman_diaconis_bins, kolmogorov_distance, mean_se, rate_fit, rms_se, skorokhod_term,
    thm2_direct, thm2_lhs, thm2_rhs, tv_histogram, TestFunction, Thm2Report, MIN_BINS,
};
use voltfluct::{Error, TimeGrid};

fn normals(n: usize, shift: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| { let z: f64 = StandardNormal.sample(&mut rng); shift + z }).collect()
}

#[test]
fn distances_between_shifted_normals() {
    // Both distances equal 2Φ(1/2) - 1 for N(0,1) against N(1,1).
    let exact = 2.0 * normal_cdf(0.5) - 1.0;
    let a = normals(100_000, 0.0, 1);
    let b = normals(100_000, 1.0, 2);
    let ks = kolmogorov_distance(&a, &b).unwrap();
    assert!((ks - exact).abs() < 0.01, "KS {ks} vs {exact}");
    let bins = freedman_diaconis_bins(&a, &b).unwrap();
    let tv = tv_histogram(&a, &b, bins).unwrap();
    assert!((tv - exact).abs() < 0.02, "TV {tv} vs {exact} with {bins} bins");

    let r = distance_report(&a, &b, 0.1, 7).unwrap();
    assert_eq!(r.kolmogorov, ks);
    assert!(r.ordering_holds());
    assert!(r.kolmogorov_se > 0.0 && r.kolmogorov_se < 0.01);
    assert!(r.tv_se > 0.0 && r.tv_se < 0.01);
}

#[test]
fn distance_edge_cases() {
    let a = [1.0, 2.0, 3.0];
    assert_eq!(kolmogorov_distance(&a, &a).unwrap(), 0.0);
    assert_eq!(kolmogorov_distance(&a, &[10.0, 11.0]).unwrap(), 1.0);
    // ties across samples: the gap is 1/3 just below 2 and at 2
    assert!((kolmogorov_distance(&a, &[2.0, 2.0]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    assert!(matches!(kolmogorov_distance(&[], &a), Err(Error::Domain(_))));
    assert!(matches!(kolmogorov_distance(&[f64::NAN], &a), Err(Error::Domain(_))));
    assert_eq!(tv_histogram(&a, &[10.0, 11.0], 16).unwrap(), 1.0);
    assert!(freedman_diaconis_bins(&a, &a).unwrap() >= MIN_BINS);
}

#[test]
fn mean_and_rms_standard_errors() {
    let v = [1.0, 2.0, 3.0, 4.0];
    let (m, se) = mean_se(&v).unwrap();
    assert_eq!(m, 2.5);
    assert!((se - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
    let (rms, _) = rms_se(&v).unwrap();
    assert!((rms - 7.5f64.sqrt()).abs() < 1e-15);
    assert_eq!(rms_se(&[0.0, 0.0]).unwrap(), (0.0, 0.0));
}

#[test]
fn rate_fit_rejects_unresolved_sweeps() {
    assert!(rate_fit(&[(0.1, 1.0), (0.2, 2.0)]).is_err());
    let err = rate_fit(&[(0.4, 0.1), (0.2, 0.0), (0.1, 0.01)]).unwrap_err();
    assert!(err.to_string().contains("resolution"));
}

#[test]
fn test_functions_parse_and_display() {
    assert_eq!("cos".parse::<TestFunction>().unwrap(), TestFunction::Cos(1.0));
    assert_eq!(" tanh : 2.5".parse::<TestFunction>().unwrap(), TestFunction::Tanh(2.5));
    assert_eq!("sigmoid:4".parse::<TestFunction>().unwrap(), TestFunction::Sigmoid(4.0));
    for bad in ["exp", "cos:x", "tanh:inf", ""] {
        assert!(bad.parse::<TestFunction>().is_err(), "{bad:?}");
    }
    for phi in [TestFunction::Cos(0.5), TestFunction::Const(-2.0)] {
        assert_eq!(phi.to_string().parse::<TestFunction>().unwrap(), phi);
    }
}

struct Coupled {
    y: Vec<f64>,
    z: Vec<f64>,
    skorokhod: Vec<f64>,
    var: f64,
}

fn coupled(preset: Preset, x0: f64, n: usize, paths: usize, seed: u64) -> Coupled {
    let disc = Discretization::new(CoefficientSet::preset(preset, &[], None).unwrap(), TimeGrid::new(1.0, n).unwrap())
        .unwrap();
    let x = solve_deterministic_limit(&disc, x0).unwrap();
    let field = solve_derivative_field(&disc, &x).unwrap();
    let batch = sample_brownian(paths, disc.grid(), seed).unwrap();
    let request = CoupledRequest { epsilons: vec![], nodes: vec![n], with_z: true, with_skorokhod: true };
    let cs = simulate_coupled(&disc, &x, &field, &batch, &request).unwrap();
    Coupled {
        y: cs.y[0].clone(),
        z: cs.z.unwrap()[0].clone(),
        skorokhod: cs.skorokhod.unwrap(),
        var: *variance_of_y(&field).values.last().unwrap(),
    }
}

#[test]
fn weak_correction_matches_gauss_hermite_for_multiplicative_noise() {
    // With b = 0, σ = x at T = 1: Y = x₀B, Z → x₀(B² - 1), δ(Z D Y) → x₀²(B³ - 3B),
    // so E[φ(Y)δ]/(2 Var Y) = E[φ(x₀B)(B³ - 3B)]/2 = E[φ'(x₀B) x₀(B² - 1)]/2.
    let x0 = 1.2;
    let phi = TestFunction::Tanh(1.0);
    let via_skorokhod = normal_expectation(1.0, |b| phi.value(x0 * b) * (b.powi(3) - 3.0 * b)) / 2.0;
    let via_z = normal_expectation(1.0, |b| phi.derivative(x0 * b) * x0 * (b * b - 1.0)) / 2.0;
    assert!((via_skorokhod - via_z).abs() < 1e-6, "{via_skorokhod} vs {via_z}");
    assert!(via_z.abs() > 0.05);

    // On the grid Z = x₀(B² - Σ ΔB²) and δ = x₀²((B² - Σ ΔB²)B - 2B + 2δB), and
    // E[Σ ΔB² | B] = B²/N + 1 - δ, which gives the exact discrete targets.
    let n = 32;
    let d = 1.0 / n as f64;
    let keep = 1.0 - d;
    let rhs_grid = normal_expectation(1.0, |b| phi.value(x0 * b) * (keep * b.powi(3) - (3.0 - 3.0 * d) * b)) / 2.0;
    let direct_grid = normal_expectation(1.0, |b| phi.derivative(x0 * b) * x0 * keep * (b * b - 1.0)) / 2.0;

    let c = coupled(Preset::Multiplicative, x0, n, 200_000, 3);
    assert!((c.var - x0 * x0).abs() < 1e-12);
    let (rhs, se) = thm2_rhs(phi, &c.y, &c.skorokhod, c.var).unwrap();
    assert!((rhs - rhs_grid).abs() < 4.0 * se, "rhs {rhs} ± {se} vs {rhs_grid}");
    let (direct, se) = thm2_direct(phi, &c.y, &c.z).unwrap();
    assert!((direct - direct_grid).abs() < 4.0 * se, "direct {direct} ± {se} vs {direct_grid}");
    // the grid targets differ from the continuum by O(δ)
    assert!((rhs_grid - via_z).abs() < 2.0 * d && (direct_grid - via_z).abs() < 2.0 * d);
}

#[test]
fn weak_correction_vanishes_by_parity() {
    // b = 0 makes Y odd and Z even in the noise, so E[φ'(Y) Z] = 0 for even φ.
    let c = coupled(Preset::Multiplicative, 1.0, 64, 50_000, 5);
    let phi = TestFunction::Cos(1.0);
    let (rhs, se) = thm2_rhs(phi, &c.y, &c.skorokhod, c.var).unwrap();
    assert!(rhs.abs() < 4.0 * se, "{rhs} ± {se}");
    let (direct, se) = thm2_direct(phi, &c.y, &c.z).unwrap();
    assert!(direct.abs() < 4.0 * se, "{direct} ± {se}");
}

#[test]
fn constant_test_function_has_no_correction() {
    let c = coupled(Preset::Trig, 1.0, 64, 20_000, 6);
    let phi = TestFunction::Const(3.0);
    assert_eq!(thm2_lhs(phi, &c.z, &c.y, 0.1).unwrap(), (0.0, 0.0));
    assert_eq!(thm2_direct(phi, &c.y, &c.z).unwrap(), (0.0, 0.0));
    let (rhs, se) = thm2_rhs(phi, &c.y, &c.skorokhod, c.var).unwrap();
    assert!(rhs.abs() < 4.0 * se, "{rhs} ± {se}");
}

#[test]
fn degenerate_variance_is_reported() {
    let c = coupled(Preset::Multiplicative, 0.0, 16, 100, 1);
    assert_eq!(c.var, 0.0);
    let err = thm2_rhs(TestFunction::Cos(1.0), &c.y, &c.skorokhod, c.var).unwrap_err();
    assert!(matches!(err, Error::DegenerateLaw { .. }));
}

#[test]
fn skorokhod_term_agrees_with_the_fused_path() {
    let n = 48;
    let disc = Discretization::new(CoefficientSet::preset(Preset::Trig, &[], None).unwrap(), TimeGrid::new(1.0, n).unwrap())
        .unwrap();
    let x = solve_deterministic_limit(&disc, 0.9).unwrap();
    let field = solve_derivative_field(&disc, &x).unwrap();
    let batch = sample_brownian(300, disc.grid(), 12).unwrap();
    let request = CoupledRequest { epsilons: vec![], nodes: vec![n], with_z: true, with_skorokhod: true };
    let cs = simulate_coupled(&disc, &x, &field, &batch, &request).unwrap();
    let y = simulate_y_euler(&disc, &x, &batch, &all_nodes(disc.grid())).unwrap();
    let dz = simulate_dz_terminal(&disc, &x, &y, &field, &batch).unwrap();
    let d_row = field.column(n).to_vec();
    let sk = skorokhod_term(&cs.y[0], &cs.z.as_ref().unwrap()[0], &dz, &d_row, disc.grid()).unwrap();
    for (a, b) in sk.iter().zip(cs.skorokhod.as_ref().unwrap()) {
        assert!((a - b).abs() < 1e-12 * b.abs().max(1.0));
    }
    assert!(skorokhod_term(&cs.y[0][..10], &cs.y[0], &dz, &d_row, disc.grid()).is_err());
}

#[test]
fn z_score_uses_the_combined_error() {
    let r = Thm2Report { test_function: TestFunction::Cos(1.0), epsilon: 0.1, lhs: 1.0, lhs_se: 0.3, rhs: 0.5, rhs_se: 0.4 };
    assert!((r.combined_se() - 0.5).abs() < 1e-15);
    assert!((r.z_score() - 1.0).abs() < 1e-15);
    let same = Thm2Report { lhs: 0.0, rhs: 0.0, lhs_se: 0.0, rhs_se: 0.0, ..r };
    assert_eq!(same.z_score(), 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kolmogorov_is_a_bounded_symmetric_rank_statistic(
        a in proptest::collection::vec(-10.0f64..10.0, 1..60),
        b in proptest::collection::vec(-10.0f64..10.0, 1..60),
    ) {
        let d = kolmogorov_distance(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert_eq!(d, kolmogorov_distance(&b, &a).unwrap());
        let cube = |v: &[f64]| v.iter().map(|x| 4.0 * x.powi(3)).collect::<Vec<f64>>();
        prop_assert_eq!(d, kolmogorov_distance(&cube(&a), &cube(&b)).unwrap());
    }

    #[test]
    fn histogram_tv_is_bounded_and_scale_invariant(
        a in proptest::collection::vec(-10.0f64..10.0, 2..80),
        b in proptest::collection::vec(-10.0f64..10.0, 2..80),
        bins in 2usize..200,
    ) {
        let tv = tv_histogram(&a, &b, bins).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&tv));
        prop_assert_eq!(tv_histogram(&a, &a, bins).unwrap(), 0.0);
        let scale = |v: &[f64]| v.iter().map(|x| 8.0 * x).collect::<Vec<f64>>();
        prop_assert!((tv - tv_histogram(&scale(&a), &scale(&b), bins).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn rate_fit_recovers_power_laws(
        slope in 0.2f64..3.0,
        scale in 0.01f64..100.0,
        noise in proptest::collection::vec(-1e-3f64..1e-3, 5),
    ) {
        let eps = [0.4f64, 0.2, 0.1, 0.05, 0.025];
        let pts: Vec<(f64, f64)> = eps.iter().zip(&noise).map(|(&e, n)| (e, scale * e.powf(slope) * n.exp())).collect();
        let fit = rate_fit(&pts).unwrap();
        prop_assert!((fit.slope - slope).abs() < 2e-3);
        prop_assert!((fit.intercept - scale.ln()).abs() < 1e-2);
        prop_assert_eq!(fit.points, 5);
    }

    #[test]
    fn test_function_derivatives_match_differences(x in -4.0f64..4.0, p in 0.2f64..3.0) {
        for phi in [TestFunction::Cos(p), TestFunction::Tanh(p), TestFunction::Sigmoid(p), TestFunction::Const(p)] {
            let h = 1e-5;
            let fd = (phi.value(x + h) - phi.value(x - h)) / (2.0 * h);
            prop_assert!((fd - phi.derivative(x)).abs() < 1e-7);
            prop_assert!(phi.value(x).abs() <= p.max(1.0));
        }
    }
}
