use nalgebra::{DMatrix, DVector};

use stochmor::covariance::{self, CovKind};
use stochmor::linsys::{self, SystemCoefficients};
use stochmor::par;
use stochmor::simulate::{self, CirParams, NoiseSpec, OutputStatistic, SimulationOptions};
use stochmor::Error;

fn scalar_gbm() -> SystemCoefficients {
    let one = DMatrix::from_element(1, 1, 1.0);
    SystemCoefficients::new(
        DMatrix::from_element(1, 1, -0.05),
        vec![DMatrix::from_element(1, 1, 0.2)],
        one.clone(),
        one.clone(),
        one,
        1.0,
    )
    .unwrap()
}

fn three_asset_model() -> SystemCoefficients {
    let k = DMatrix::from_row_slice(3, 3, &[1.0, 0.6, 0.3, 0.6, 1.0, 0.5, 0.3, 0.5, 1.0]);
    let xi = DVector::from_vec(vec![0.2, 0.3, 0.25]);
    let x0 = DVector::from_vec(vec![1.0, 0.8, 1.2]);
    let (mut sys, _) = linsys::build_bs_model(0.02, 0.07, &xi, &x0, &k, 1.0).unwrap();
    sys.c = linsys::basket_output(3);
    sys
}

fn full_state(paths: usize, dt: f64, seed: u64) -> SimulationOptions {
    SimulationOptions {
        store_full_state: true,
        store_reduced_state: false,
        ..SimulationOptions::new(paths, dt, vec![1.0], seed)
    }
}

fn terminal_values(ens: &simulate::PathEnsemble) -> Vec<f64> {
    (0..ens.paths).map(|p| ens.x(p, 0)[0]).collect()
}

#[test]
fn euler_mean_matches_exponential_growth() {
    let sys = scalar_gbm();
    let noise = NoiseSpec::from_system(&sys).unwrap();
    let ens = simulate::simulate_coupled(&sys, &[], &noise, &full_state(100_000, 0.01, 3)).unwrap();
    let (m, se) = simulate::mean_stderr(&terminal_values(&ens));
    let want = (-0.05f64).exp();
    assert!((m - want).abs() < 3.0 * se, "mean {m} vs {want} (se {se})");

    let exact = simulate::exact_gbm_paths(&sys, 100_000, &[1.0], None, 4).unwrap();
    let (m, se) = simulate::mean_stderr(&terminal_values(&exact));
    assert!((m - want).abs() < 3.0 * se, "exact mean {m} vs {want} (se {se})");
}

#[test]
fn scalar_second_moment() {
    let sys = scalar_gbm();
    let noise = NoiseSpec::from_system(&sys).unwrap();
    let ens = simulate::simulate_coupled(&sys, &[], &noise, &full_state(100_000, 0.01, 5)).unwrap();
    let est = &simulate::mc_covariance(&ens).unwrap()[0];
    let want = (-0.06f64).exp();
    let z = (est.mean[(0, 0)] - want).abs() / est.stderr[(0, 0)];
    assert!(z < 3.0, "z = {z:.2}");
}

#[test]
fn euler_strong_order_one_half() {
    let sys = scalar_gbm();
    let noise = NoiseSpec::from_system(&sys).unwrap();
    let rms = |dt: f64| {
        let euler = simulate::simulate_coupled(&sys, &[], &noise, &full_state(20_000, dt, 9)).unwrap();
        let exact = simulate::exact_gbm_paths(&sys, 20_000, &[1.0], Some(dt), 9).unwrap();
        let e = terminal_values(&euler);
        let x = terminal_values(&exact);
        (e.iter().zip(&x).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / e.len() as f64).sqrt()
    };
    let coarse = rms(0.02);
    let fine = rms(0.01);
    let ratio = coarse / fine;
    // Euler is strong order 1/2 for multiplicative noise
    assert!((ratio / 2f64.sqrt() - 1.0).abs() < 0.2, "ratio {ratio:.3}");
}

#[test]
fn identity_reduction_has_zero_l2_error() {
    let sys = three_asset_model();
    let eye = DMatrix::identity(3, 3);
    let red = linsys::petrov_galerkin_reduce(&sys, &eye, &eye).unwrap();
    let noise = NoiseSpec::from_system(&sys).unwrap();
    let opts = SimulationOptions {
        track_l2: true,
        ..SimulationOptions::new(2_000, 0.01, vec![1.0], 1)
    };
    let ens = simulate::simulate_coupled(&sys, &[red], &noise, &opts).unwrap();
    let l2 = simulate::l2_error_estimate(&ens, 0).unwrap();
    assert!(l2.err <= 1e-12 * l2.norm_y, "err {:.3e}", l2.err);
    assert!(l2.norm_y > 0.0);
}

#[test]
fn l2_needs_tracking() {
    let sys = scalar_gbm();
    let eye = DMatrix::identity(1, 1);
    let red = linsys::petrov_galerkin_reduce(&sys, &eye, &eye).unwrap();
    let noise = NoiseSpec::from_system(&sys).unwrap();
    let ens = simulate::simulate_coupled(&sys, &[red], &noise, &SimulationOptions::new(10, 0.1, vec![1.0], 1)).unwrap();
    assert!(simulate::l2_error_estimate(&ens, 0).is_err());
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let sys = three_asset_model();
    let v = DMatrix::from_column_slice(3, 1, &[0.6, 0.6, 0.529_150_262_212_918_1]);
    let red = linsys::petrov_galerkin_reduce(&sys, &v, &v).unwrap();
    let noise = NoiseSpec::from_system(&sys).unwrap();
    let opts = SimulationOptions {
        track_l2: true,
        statistic: Some(OutputStatistic::Scalar),
        ..SimulationOptions::new(10_000, 0.05, vec![0.5, 1.0], 11)
    };
    let run = |t| par::with_threads(t, || simulate::simulate_coupled(&sys, &[red.clone()], &noise, &opts).unwrap()).unwrap();
    let a = run(1);
    let b = run(4);
    assert_eq!(a.stat, b.stat);
    assert_eq!(a.reduced[0].err_sq, b.reduced[0].err_sq);
    assert_eq!(a.reduced[0].xhat, b.reduced[0].xhat);
}

#[test]
fn constant_volatility_reproduces_black_scholes_covariance() {
    let c = 0.5;
    let mut sys = three_asset_model();
    let noise = NoiseSpec::capped_cir_scalar(&sys.k_m, CirParams::constant(c)).unwrap();
    let ens = simulate::simulate_heston(&sys, &[], &noise, &full_state(100_000, 1e-3, 13)).unwrap();
    let est = &simulate::mc_covariance(&ens).unwrap()[0];

    sys.k_m *= c;
    let exact = covariance::solve_covariance(&sys.kron(), &(&sys.x0 * sys.x0.transpose()), 1.0, 1, CovKind::Primal)
        .unwrap()
        .terminal()
        .clone();
    for i in 0..3 {
        for j in 0..3 {
            let z = (est.mean[(i, j)] - exact[(i, j)]).abs() / est.stderr[(i, j)];
            assert!(z < 3.0, "entry ({i},{j}): z = {z:.2}");
        }
    }
}

#[test]
fn capped_volatility_is_dominated() {
    let cap = 0.09;
    let sys = three_asset_model();
    let cir = CirParams {
        kappa: 2.0,
        theta: 0.06,
        sigma: 0.4,
        v0: 0.04,
        cap: Some(cap),
    };
    let noise = NoiseSpec::capped_cir_scalar(&sys.k_m, cir).unwrap();
    let ens = simulate::simulate_heston(&sys, &[], &noise, &full_state(50_000, 0.01, 17)).unwrap();
    let est = &simulate::mc_covariance(&ens).unwrap()[0];

    let mut dom = sys.clone();
    dom.k_m = noise.dominating_covariance();
    let envelope = covariance::solve_covariance(&dom.kron(), &(&dom.x0 * dom.x0.transpose()), 1.0, 1, CovKind::Primal)
        .unwrap()
        .terminal()
        .clone();
    let gap = &envelope - &est.mean;
    let lmin = gap.symmetric_eigenvalues().min();
    assert!(lmin >= -3.0 * est.stderr.norm(), "lambda_min {lmin:.3e}");
}

#[test]
fn cir_noise_without_cap_is_rejected() {
    let sys = three_asset_model();
    let cir = CirParams {
        cap: None,
        ..CirParams::constant(0.04)
    };
    let err = NoiseSpec::capped_cir_scalar(&sys.k_m, cir)
        .and_then(|n| simulate::simulate_heston(&sys, &[], &n, &full_state(10, 0.1, 1)));
    assert!(matches!(err, Err(Error::CapMissing)), "{err:?}");

    let brownian = NoiseSpec::from_system(&sys).unwrap();
    assert!(simulate::simulate_heston(&sys, &[], &brownian, &full_state(10, 0.1, 1)).is_err());
}

#[test]
fn observation_dates_must_lie_on_the_step_grid() {
    let sys = scalar_gbm();
    let noise = NoiseSpec::from_system(&sys).unwrap();
    let bad = SimulationOptions::new(10, 0.3, vec![1.0], 1);
    assert!(simulate::simulate_coupled(&sys, &[], &noise, &bad).is_err());
}
