//! Hankel singular values of the basket and max-call models.

use stochmor::cli::{self, ExperimentConfig};

fn main() -> stochmor::Result<()> {
    for (name, cfg) in [("basket", ExperimentConfig::basket(7)), ("max-call", ExperimentConfig::maxcall(7))] {
        let model = cli::generate_model(&cfg)?;
        let h = cli::hsv_of_model(&model.inst.sys, cfg.reduction.grid, false)?;
        println!("{name}: sigma1/sigma2 = {:.1}", h.hsv[0] / h.hsv[1]);
        for (i, s) in h.hsv.iter().take(8).enumerate() {
            println!("  {:>2}  {s:.4e}  log10 {:>7.3}", i + 1, s.log10());
        }
    }
    Ok(())
}
