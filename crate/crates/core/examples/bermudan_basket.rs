//! Bermudan basket call priced by Longstaff-Schwartz on reduced models of a
//! 10-asset basket, with the pathwise bound on the price gap.

use stochmor::cli::{self, ExperimentConfig};

fn main() -> stochmor::Result<()> {
    let mut cfg = ExperimentConfig::basket(3);
    cfg.model.n = 10;
    cfg.reduction.nhat = vec![1, 2, 3];
    cfg.simulation.paths = 50_000;
    cfg.simulation.eval_paths = Some(50_000);
    cfg.simulation.dt = 0.025;
    cfg.validate()?;

    let model = cli::generate_model(&cfg)?;
    let (sys, z0) = (&model.inst.sys, &model.inst.z0);
    let recs = cli::reduce_sweep(sys, &cfg.reduction, |_| Ok(()))?;
    let reds: Vec<_> = recs.into_iter().map(|r| r.red).collect();
    let spec = cli::exercise_spec(&cfg, sys, z0, Some(cfg.model.r))?;
    println!("strike {:.4}, dates {:?}", spec.strike, spec.dates);

    println!("nhat  value      stderr    pathwise bound");
    for r in cli::price_sweep(&cfg, sys, z0, &reds, &spec)? {
        println!(
            "{:>4}  {:.5}   {:.5}   {:.5}",
            r.nhat,
            r.value,
            r.stderr,
            r.pathwise_bound.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}
