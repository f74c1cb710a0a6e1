//! Capped CIR volatility: the Black-Scholes covariance with the capped
//! variance dominates the simulated covariance.

use nalgebra::{DMatrix, DVector};
use stochmor::covariance::{self, CovKind};
use stochmor::linsys;
use stochmor::simulate::{self, CirParams, NoiseSpec, SimulationOptions};

fn main() -> stochmor::Result<()> {
    let k = DMatrix::from_row_slice(3, 3, &[1.0, 0.6, 0.3, 0.6, 1.0, 0.5, 0.3, 0.5, 1.0]);
    let (mut sys, _) = linsys::build_bs_model(
        0.02,
        0.07,
        &DVector::from_vec(vec![0.2, 0.3, 0.25]),
        &DVector::from_vec(vec![1.0, 0.8, 1.2]),
        &k,
        1.0,
    )?;
    sys.c = linsys::basket_output(3);

    let cir = CirParams {
        kappa: 2.0,
        theta: 0.06,
        sigma: 0.4,
        v0: 0.04,
        cap: Some(0.09),
    };
    let noise = NoiseSpec::capped_cir_scalar(&sys.k_m, cir)?;
    let opts = SimulationOptions {
        store_full_state: true,
        store_reduced_state: false,
        ..SimulationOptions::new(50_000, 0.01, vec![1.0], 1)
    };
    let ens = simulate::simulate_heston(&sys, &[], &noise, &opts)?;
    let mc = &simulate::mc_covariance(&ens)?[0];

    let mut envelope = sys.clone();
    envelope.k_m = noise.dominating_covariance();
    let init = &sys.x0 * sys.x0.transpose();
    let f = covariance::solve_covariance(&envelope.kron(), &init, 1.0, 1, CovKind::Primal)?;
    let gap = f.terminal() - &mc.mean;
    println!("envelope F(T):\n{:.5}", f.terminal());
    println!("capped MC E[x x^T]:\n{:.5}", mc.mean);
    println!(
        "eigenvalues of the gap: {:.3e}  (stderr scale {:.1e})",
        gap.symmetric_eigenvalues().transpose(),
        mc.stderr.norm()
    );
    Ok(())
}
