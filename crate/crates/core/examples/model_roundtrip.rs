//! Write a generated model and a reduced model to JSON and read them back.

use stochmor::cli::{self, ExperimentConfig};
use stochmor::io::{self, ModelFile, ReducedFile};

fn main() -> stochmor::Result<()> {
    let mut cfg = ExperimentConfig::basket(11);
    cfg.model.n = 5;
    cfg.reduction.nhat = vec![2];
    let model = cli::generate_model(&cfg)?;

    let dir = std::env::temp_dir().join("stochmor-roundtrip");
    let path = dir.join("model.json");
    io::write_json(&path, &model.file)?;
    let back = ModelFile::read(&path)?;
    let (sys, _) = back.system()?;
    println!("model: {} ({} bytes), identical coefficients: {}", path.display(), std::fs::metadata(&path)?.len(), sys == model.inst.sys);

    let rec = &cli::reduce_sweep(&sys, &cfg.reduction, |_| Ok(()))?[0];
    let prov = cfg.provenance(cfg.reduction.seed);
    let f = ReducedFile::new(&rec.red, rec.algorithm.name(), rec.diagnostics.clone(), prov);
    let rpath = dir.join("reduced_nhat2.json");
    io::write_json(&rpath, &f)?;
    let red = ReducedFile::read(&rpath)?.reduced(&sys)?;
    println!("reduced: {}, identical A-hat: {}", rpath.display(), red.a == rec.red.a);
    println!("config sha256 {}", f.provenance.config_sha256);
    Ok(())
}
