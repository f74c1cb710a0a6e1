use approx::assert_relative_eq;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use stochmor::covariance::{self, GramianOptions};
use stochmor::linalg;
use stochmor::linsys::{self, InitialExpansion, ReducedSystem, SystemCoefficients};
use stochmor::models::{random_system, RandomSpec};
use stochmor::mor::{self, DiagnosticsLevel, FixedPointOptions};
use stochmor::Error;

fn scalar(c: f64) -> SystemCoefficients {
    let one = DMatrix::from_element(1, 1, 1.0);
    SystemCoefficients::new(
        DMatrix::from_element(1, 1, -0.05),
        vec![DMatrix::from_element(1, 1, 0.2)],
        one.clone(),
        DMatrix::from_element(1, 1, c),
        one,
        1.0,
    )
    .unwrap()
}

fn gauss(r: usize, c: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(rng))
}

fn test_system(seed: u64) -> SystemCoefficients {
    random_system(&RandomSpec::new(10), seed).unwrap()
}

#[test]
fn full_order_reduction_is_exact() {
    let sys = test_system(1);
    let r = mor::sylvester_fixed_point(&sys, 10, &FixedPointOptions::default()).unwrap();
    assert!(r.diagnostics.converged);
    assert!(r.diagnostics.iterations <= 2, "{} iterations", r.diagnostics.iterations);
    let gram = covariance::solve_all_gramians(&sys, &r.red, 200).unwrap();
    let b = mor::error_bound(&sys, &r.red, &gram, &InitialExpansion::unit()).unwrap();
    let scale = (&sys.c * gram.p.as_ref().unwrap() * sys.c.transpose()).trace();
    assert!(b.value <= 1e-10 * scale, "bound {:.3e}", b.value);
    let (p, q) = mor::terminal_covariance_error(&r.red, &gram).unwrap();
    assert!(p < 1e-10 && q < 1e-10);
}

#[test]
fn converged_iterate_satisfies_the_fixed_point_identity() {
    let sys = test_system(2);
    let opts = FixedPointOptions {
        max_iter: 500,
        tol: 1e-10,
        ..Default::default()
    };
    let r = mor::sylvester_fixed_point(&sys, 2, &opts).unwrap();
    assert!(r.diagnostics.converged);
    let (i, ii) = r.diagnostics.identity_residuals.unwrap();
    assert!(i <= 1e-8 && ii <= 1e-8, "identity residuals {i:.3e} {ii:.3e}");
    let bound = r.diagnostics.bound_value.unwrap();
    assert!(bound >= 0.0);
}

#[test]
fn random_projection_violates_the_identity() {
    let sys = test_system(3);
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let v = linalg::orth(&gauss(10, 2, &mut rng), 1e-12).unwrap().basis;
    let w = linalg::orth(&gauss(10, 2, &mut rng), 1e-12).unwrap().basis;
    let red = linsys::petrov_galerkin_reduce(&sys, &v, &w).unwrap();
    let gram = covariance::solve_all_gramians(&sys, &red, 200).unwrap();
    let (i, ii) = mor::fixed_point_identity_check(&sys, &red, &gram).unwrap();
    assert!(i > 1e-3 && ii > 1e-3, "identity residuals {i:.3e} {ii:.3e}");
}

#[test]
fn scalar_full_order_identity_reports_zero() {
    let sys = scalar(1.0);
    let one = DMatrix::identity(1, 1);
    let red = linsys::petrov_galerkin_reduce(&sys, &one, &one).unwrap();
    let gram = covariance::solve_all_gramians(&sys, &red, 50).unwrap();
    let (i, ii) = mor::fixed_point_identity_check(&sys, &red, &gram).unwrap();
    assert_eq!((i, ii), (0.0, 0.0));
}

#[test]
fn perturbed_output_gives_closed_form_residual() {
    // P-hat = P-tilde for identical dynamics, so residual (a) = |1.1 - 1| = 0.1
    let sys = scalar(1.0);
    let one = DMatrix::identity(1, 1);
    let mut red = linsys::petrov_galerkin_reduce(&sys, &one, &one).unwrap();
    red.c[(0, 0)] = 1.1;
    let sol = covariance::solve_all(&sys, &red, &GramianOptions { grid: 50, ..Default::default() }).unwrap();
    let res = mor::optimality_residuals(&sys, &red, &sol.gramians, &sol.trajectories).unwrap();
    assert_relative_eq!(res.values[0], 0.1, epsilon = 1e-12);
    assert!(res.values[1] > 0.0);

    let lg = mor::limit_gramians(&sys, &red, false).unwrap();
    let lres = mor::limit_optimality_residuals(&sys, &red, &lg).unwrap();
    assert_relative_eq!(lres.values[0], 0.1, epsilon = 1e-12);
}

#[test]
fn full_order_residuals_vanish() {
    let sys = test_system(4);
    let eye = DMatrix::identity(10, 10);
    let red = linsys::petrov_galerkin_reduce(&sys, &eye, &eye).unwrap();
    let sol = covariance::solve_all(&sys, &red, &GramianOptions::default()).unwrap();
    let res = mor::optimality_residuals(&sys, &red, &sol.gramians, &sol.trajectories).unwrap();
    assert!(res.values.iter().all(|&r| r <= 1e-8), "{:?}", res.values);
    let lg = mor::limit_gramians(&sys, &red, false).unwrap();
    let lres = mor::limit_optimality_residuals(&sys, &red, &lg).unwrap();
    assert!(lres.values.iter().all(|&r| r <= 1e-12), "{:?}", lres.values);
    let (fp, fq) = mor::limit_fit(&red, &lg).unwrap();
    assert!(fp <= 1e-12 && fq <= 1e-12);
}

#[test]
fn infinite_horizon_fixed_point_is_exact() {
    let sys = test_system(5);
    let opts = FixedPointOptions {
        max_iter: 500,
        seed: 5,
        tol: 1e-10,
        ..Default::default()
    };
    let r = mor::stable_fixed_point(&sys, 3, &opts).unwrap();
    assert!(r.diagnostics.converged);
    let lr = r.diagnostics.limit_residuals.unwrap();
    assert!(lr.iter().all(|&v| v <= 1e-8), "{lr:?}");
    let (fp, fq) = r.diagnostics.limit_fit.unwrap();
    assert!(fp <= 1e-8 && fq <= 1e-8, "{fp:.3e} {fq:.3e}");
}

#[test]
fn unstable_model_is_rejected_by_the_infinite_horizon_variant() {
    let mut sys = test_system(6);
    sys.a += DMatrix::identity(10, 10) * 2.0;
    match mor::stable_fixed_point(&sys, 2, &FixedPointOptions::default()) {
        Err(Error::UnstableSystem { abscissa }) => assert!(abscissa > 0.0),
        other => panic!("unexpected {:?}", other.map(|r| r.diagnostics)),
    }
}

#[test]
fn exhausted_iterations_keep_the_best_iterate() {
    let sys = test_system(7);
    let opts = FixedPointOptions {
        max_iter: 1,
        tol: 1e-15,
        diagnostics: DiagnosticsLevel::None,
        ..Default::default()
    };
    match mor::sylvester_fixed_point(&sys, 3, &opts) {
        Err(Error::NotConverged { iterations, best, .. }) => {
            assert_eq!(iterations, 1);
            assert_eq!(best.red.nhat(), 3);
            assert!(!best.diagnostics.converged);
        }
        other => panic!("unexpected {:?}", other.map(|r| r.diagnostics)),
    }
}

#[test]
fn order_out_of_range_is_an_error() {
    let sys = test_system(8);
    assert!(mor::sylvester_fixed_point(&sys, 0, &FixedPointOptions::default()).is_err());
    assert!(mor::sylvester_fixed_point(&sys, 11, &FixedPointOptions::default()).is_err());
}

#[test]
fn scalar_model_hsv() {
    let sys = scalar(1.0);
    let (p, q) = covariance::full_gramians(&sys, 100).unwrap();
    let h = mor::hankel_singular_values(&p, &q).unwrap();
    assert_relative_eq!(h.hsv[0], ((-0.06f64).exp() - 1.0) / -0.06, epsilon = 1e-12);
}

fn reduced_is_finite(red: &ReducedSystem) -> bool {
    red.a.iter().chain(red.c.iter()).all(|v| v.is_finite())
}

#[test]
fn krylov_start_spans_requested_order() {
    let sys = test_system(9);
    let (v, w) = mor::krylov_initial_guess(&sys, 4, 1);
    assert_eq!(v.shape(), (10, 4));
    assert_relative_eq!(v.transpose() * &v, DMatrix::identity(4, 4), epsilon = 1e-12);
    assert_relative_eq!(w.transpose() * &w, DMatrix::identity(4, 4), epsilon = 1e-12);
    let red = linsys::petrov_galerkin_reduce(&sys, &v, &w).unwrap();
    assert!(reduced_is_finite(&red));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn hsv_are_invariant_under_state_transforms(seed in any::<u64>(), n in 1usize..=5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fp = gauss(n, n, &mut rng);
        let fq = gauss(n, n, &mut rng);
        let p = &fp * fp.transpose() + DMatrix::identity(n, n) * 0.1;
        let q = &fq * fq.transpose() + DMatrix::identity(n, n) * 0.1;
        let t = gauss(n, n, &mut rng) + DMatrix::identity(n, n) * 3.0;
        let t_inv = t.clone().try_inverse().unwrap();
        let p2 = linalg::symmetrize(&(&t * &p * t.transpose()));
        let q2 = linalg::symmetrize(&(t_inv.transpose() * &q * &t_inv));
        let h1 = mor::hankel_singular_values(&p, &q).unwrap().hsv;
        let h2 = mor::hankel_singular_values(&p2, &q2).unwrap().hsv;
        for i in 0..n {
            prop_assert!((h1[i] - h2[i]).abs() <= 1e-8 * h1[0], "{} vs {}", h1[i], h2[i]);
        }
    }
}
