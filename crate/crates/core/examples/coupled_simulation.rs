//! Full and reduced systems driven by the same Brownian increments: the Monte
//! Carlo output error stays below the error bound.

use stochmor::models::{random_system, RandomSpec};
use stochmor::mor::{self, FixedPointOptions};
use stochmor::{cli, covariance, Error, InitialExpansion};

fn main() -> stochmor::Result<()> {
    let sys = random_system(&RandomSpec::new(20), 1)?;
    let z0 = InitialExpansion::unit();
    let mut reds = Vec::new();
    let mut bounds = Vec::new();
    for nhat in [1, 3, 5] {
        let r = match mor::sylvester_fixed_point(&sys, nhat, &FixedPointOptions::default()) {
            Err(Error::NotConverged { best, .. }) => *best,
            other => other?,
        };
        let g = covariance::solve_all_gramians(&sys, &r.red, 200)?;
        bounds.push(mor::error_bound(&sys, &r.red, &g, &z0)?.value);
        reds.push(r.red);
    }
    let l2 = cli::l2_sweep(&sys, &z0, &reds, 5_000, 1e-3, 3)?;
    println!("nhat   E int |y - y^|^2       bound");
    for ((nhat, e), b) in [1, 3, 5].iter().zip(&l2).zip(&bounds) {
        println!("{nhat:>4}   {:.4e} +- {:.1e}   {b:.4e}", e.err_sq_mean, e.err_sq_stderr);
    }
    Ok(())
}
