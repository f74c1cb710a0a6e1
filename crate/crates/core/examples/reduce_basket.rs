//! Reduce the 50-asset basket model to orders 1..5 and print the error
//! bound and terminal covariance errors.
//!
//! `cargo run --release --example reduce_basket -- 7` (model seed)

use stochmor::cli::ExperimentConfig;
use stochmor::{cli, covariance, mor, InitialExpansion};

fn main() -> stochmor::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(7);
    let cfg = ExperimentConfig::basket(seed);
    let model = cli::generate_model(&cfg)?;
    let sys = &model.inst.sys;
    let y0 = (&sys.c * &sys.x0)[(0, 0)];
    println!("n = {}, y(0) = {y0:.4}", sys.n());

    println!("nhat  iter  conv   bound       cov err     dual err");
    for rec in cli::reduce_sweep(sys, &cfg.reduction, |_| Ok(()))? {
        let d = &rec.diagnostics;
        let (p, q) = d.terminal_cov_err.unwrap_or((f64::NAN, f64::NAN));
        println!(
            "{:>4}  {:>4}  {:<5}  {:.3e}   {:.3e}   {:.3e}",
            rec.nhat,
            d.iterations,
            d.converged,
            d.bound_value.unwrap_or(f64::NAN),
            p,
            q
        );
        if rec.nhat == 1 {
            // the bound can also be evaluated directly from the Gramians
            let g = covariance::solve_all_gramians(sys, &rec.red, cfg.reduction.grid)?;
            let b = mor::error_bound(sys, &rec.red, &g, &InitialExpansion::unit())?;
            println!("      (direct bound {:.3e})", b.value);
        }
    }
    Ok(())
}
