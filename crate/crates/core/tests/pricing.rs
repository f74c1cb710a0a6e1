use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ContinuousCDF, Normal};

use stochmor::linsys::{self, ReducedSystem, SystemCoefficients};
use stochmor::pricing::{self, BasisSpec, ExerciseSpec, LsOptions, PayoffKind, PricingSimulation};
use stochmor::simulate::{self, NoiseSpec, OutputStatistic, SimulationOptions};
use stochmor::Error;

const R: f64 = 0.02;
const DELTA: f64 = 0.07;
const VOL: f64 = 0.2;

fn one_asset() -> SystemCoefficients {
    let (mut sys, _) = linsys::build_bs_model(
        R,
        DELTA,
        &DVector::from_element(1, VOL),
        &DVector::from_element(1, 1.0),
        &DMatrix::identity(1, 1),
        1.0,
    )
    .unwrap();
    sys.c = linsys::basket_output(1);
    sys
}

fn identity(sys: &SystemCoefficients) -> ReducedSystem {
    let eye = DMatrix::identity(sys.n(), sys.n());
    linsys::petrov_galerkin_reduce(sys, &eye, &eye).unwrap()
}

/// Call on a dividend-paying asset.
fn black_scholes_call(s: f64, k: f64, r: f64, q: f64, vol: f64, t: f64) -> f64 {
    let nd = Normal::new(0.0, 1.0).unwrap();
    let d1 = ((s / k).ln() + (r - q + 0.5 * vol * vol) * t) / (vol * t.sqrt());
    let d2 = d1 - vol * t.sqrt();
    s * (-q * t).exp() * nd.cdf(d1) - k * (-r * t).exp() * nd.cdf(d2)
}

fn european(strike: f64) -> ExerciseSpec {
    ExerciseSpec {
        dates: vec![1.0],
        rate: R,
        strike,
        payoff_kind: PayoffKind::BasketCall,
    }
}

#[test]
fn single_date_price_matches_closed_form_call() {
    let sys = one_asset();
    let red = identity(&sys);
    let noise = NoiseSpec::from_system(&sys).unwrap();
    let sim = PricingSimulation {
        paths_regress: 100_000,
        paths_eval: 100_000,
        dt: 1e-3,
        seed: 1,
    };
    let opts = LsOptions {
        seed: 2,
        ..Default::default()
    };
    let res = pricing::price_reduced_models(&sys, &[red], &noise, &european(1.0), BasisSpec::default(), &opts, &sim).unwrap();
    let want = black_scholes_call(1.0, 1.0, R, DELTA, VOL, 1.0);
    let r = &res[0];
    assert!((r.value - want).abs() < 3.0 * r.stderr, "{} vs {want} (se {})", r.value, r.stderr);
    assert!(r.pathwise_bound.unwrap() <= 1e-12);
}

#[test]
fn single_date_price_is_the_discounted_payoff_mean() {
    let sys = one_asset();
    let red = identity(&sys);
    let noise = NoiseSpec::from_system(&sys).unwrap();
    let spec = european(0.95);
    let opts = SimulationOptions {
        statistic: Some(OutputStatistic::Scalar),
        ..SimulationOptions::new(20_000, 0.01, vec![1.0], 3)
    };
    let ens = simulate::simulate_coupled(&sys, &[red], &noise, &opts).unwrap();
    let ls_opts = LsOptions {
        two_pass: false,
        ..Default::default()
    };
    let r = pricing::longstaff_schwartz(&ens, None, 0, &spec, BasisSpec::default(), &ls_opts).unwrap();
    let discounted: Vec<f64> = (0..ens.paths).map(|p| spec.payoff(ens.stat(p, 0), 1.0)).collect();
    let (mean, _) = simulate::mean_stderr(&discounted);
    assert!((r.value - mean).abs() <= 1e-12 * mean.max(1.0));
}

#[test]
fn full_order_reduction_has_zero_pathwise_bound() {
    let spec_m = stochmor::models::BsSpec {
        n: 4,
        ..stochmor::models::BsSpec::basket()
    };
    let inst = stochmor::models::generate_bs(&spec_m, 3).unwrap();
    let red = identity(&inst.sys);
    let noise = NoiseSpec::from_system(&inst.sys).unwrap();
    let y0 = (&inst.sys.c * &inst.sys.x0)[(0, 0)];
    let spec = ExerciseSpec {
        dates: vec![0.25, 0.5, 0.75, 1.0],
        rate: R,
        strike: y0,
        payoff_kind: PayoffKind::BasketCall,
    };
    let sim = PricingSimulation {
        paths_regress: 20_000,
        paths_eval: 20_000,
        dt: 0.05,
        seed: 5,
    };
    let opts = LsOptions {
        seed: 6,
        ..Default::default()
    };
    let res = pricing::price_reduced_models(&inst.sys, &[red], &noise, &spec, BasisSpec::default(), &opts, &sim).unwrap();
    assert_eq!(res[0].pathwise_bound, Some(0.0));
    assert!(res[0].value > 0.0);
}

#[test]
fn constant_basis_prices_are_sane() {
    let sys = one_asset();
    let red = identity(&sys);
    let noise = NoiseSpec::from_system(&sys).unwrap();
    let spec = ExerciseSpec {
        dates: vec![0.5, 1.0],
        ..european(1.0)
    };
    let sim = PricingSimulation {
        paths_regress: 20_000,
        paths_eval: 20_000,
        dt: 0.01,
        seed: 7,
    };
    let basis = BasisSpec {
        max_total_degree: 0,
        include_payoff: false,
    };
    let opts = LsOptions {
        seed: 8,
        ..Default::default()
    };
    let r = &pricing::price_reduced_models(&sys, &[red], &noise, &spec, basis, &opts, &sim).unwrap()[0];
    assert_eq!(r.basis_count, 1);
    // any stopping rule is worth less than the asset itself
    assert!(r.value > 0.0 && r.value < 1.0);
}

#[test]
fn too_few_paths_are_rejected() {
    let sys = one_asset();
    let red = identity(&sys);
    let noise = NoiseSpec::from_system(&sys).unwrap();
    let spec = ExerciseSpec {
        dates: vec![0.5, 1.0],
        ..european(1.0)
    };
    let sim = PricingSimulation {
        paths_regress: 100,
        paths_eval: 100,
        dt: 0.1,
        seed: 1,
    };
    let opts = LsOptions {
        seed: 2,
        ..Default::default()
    };
    let err = pricing::price_reduced_models(&sys, &[red], &noise, &spec, BasisSpec::default(), &opts, &sim);
    assert!(matches!(err, Err(Error::InsufficientPaths { .. })), "{err:?}");
}

#[test]
fn evaluation_seed_must_differ() {
    let sys = one_asset();
    let red = identity(&sys);
    let noise = NoiseSpec::from_system(&sys).unwrap();
    let sim = PricingSimulation {
        paths_regress: 1000,
        paths_eval: 1000,
        dt: 0.1,
        seed: 4,
    };
    let opts = LsOptions {
        seed: 4,
        ..Default::default()
    };
    let err = pricing::price_reduced_models(&sys, &[red], &noise, &european(1.0), BasisSpec::default(), &opts, &sim);
    assert!(matches!(err, Err(Error::Config(_))));
}

#[test]
fn pathwise_bound_controls_the_price_gap() {
    let spec_m = stochmor::models::BsSpec {
        n: 6,
        ..stochmor::models::BsSpec::basket()
    };
    let inst = stochmor::models::generate_bs(&spec_m, 11).unwrap();
    let sys = &inst.sys;
    let full = identity(sys);
    let v = DMatrix::from_element(sys.n(), 1, 1.0 / (sys.n() as f64).sqrt());
    let crude = linsys::petrov_galerkin_reduce(sys, &v, &v).unwrap();
    let noise = NoiseSpec::from_system(sys).unwrap();
    let y0 = (&sys.c * &sys.x0)[(0, 0)];
    let spec = ExerciseSpec {
        dates: vec![0.25, 0.5, 0.75, 1.0],
        rate: R,
        strike: y0,
        payoff_kind: PayoffKind::BasketCall,
    };
    let sim = PricingSimulation {
        paths_regress: 50_000,
        paths_eval: 50_000,
        dt: 0.05,
        seed: 21,
    };
    let opts = LsOptions {
        seed: 22,
        ..Default::default()
    };
    let res = pricing::price_reduced_models(sys, &[full, crude], &noise, &spec, BasisSpec::default(), &opts, &sim).unwrap();
    let gap = (res[0].value - res[1].value).abs();
    let bound = res[1].pathwise_bound.unwrap();
    let se = res[0].stderr.hypot(res[1].stderr);
    assert!(bound > 0.0);
    assert!(gap <= bound + 3.0 * se, "gap {gap:.4} bound {bound:.4}");
}
