//! The `stochmor` command line: `generate | reduce | hsv | price | experiment`.
//!
//! Every command reads an [`ExperimentConfig`] (a TOML file or a named
//! preset), applies flag overrides, and writes JSON and CSV files into
//! `--out`. All outputs carry a provenance header with the SHA-256 of the
//! effective configuration, the seed and the crate version. Experiments write
//! each table as soon as it is available, so a failing stage leaves the
//! earlier results on disk.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::covariance::{self, DEFAULT_GRID, DEFAULT_MEMORY_BUDGET};
use crate::error::{Error, Result};
use crate::io::{self, num, BsRecord, ModelFile, Provenance, ReducedFile};
use crate::linsys::{InitialExpansion, ReducedSystem, SystemCoefficients};
use crate::models::{self, BsSpec, CorrelationProfile, OutputKind};
use crate::mor::{self, DiagnosticsLevel, FixedPointOptions, HsvReport, ReductionDiagnostics};
use crate::par;
use crate::pricing::{self, BasisSpec, ExerciseSpec, LsOptions, PayoffKind, PricingResult, PricingSimulation};
use crate::simulate::{self, L2Estimate, NoiseSpec, SimulationOptions};

/// Above this state dimension the full-order Gramians need `--full-gramians`.
pub const FULL_GRAMIAN_MAX_N: usize = 80;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    #[value(name = "finite")]
    FiniteHorizon,
    #[value(name = "infinite")]
    InfiniteHorizon,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::FiniteHorizon => "finite_horizon",
            Algorithm::InfiniteHorizon => "infinite_horizon",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n: usize,
    pub r: f64,
    pub delta: f64,
    pub xi_range: [f64; 2],
    pub x0_range: [f64; 2],
    pub profile: CorrelationProfile,
    #[serde(default = "one")]
    pub horizon: f64,
    pub output: OutputKind,
    pub seed: u64,
}

fn one() -> f64 {
    1.0
}

impl ModelConfig {
    pub fn bs_spec(&self) -> BsSpec {
        BsSpec {
            n: self.n,
            r: self.r,
            delta: self.delta,
            xi_range: (self.xi_range[0], self.xi_range[1]),
            x0_range: (self.x0_range[0], self.x0_range[1]),
            profile: self.profile,
            horizon: self.horizon,
            output: self.output,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReductionConfig {
    pub nhat: Vec<usize>,
    pub algorithm: Algorithm,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_grid")]
    pub grid: usize,
    /// Compute full-order Gramians (error bound, HSVs) even when `n` is large.
    #[serde(default)]
    pub full_gramians: bool,
    /// Seed of random restarts.
    pub seed: u64,
}

fn default_tol() -> f64 {
    1e-6
}
fn default_max_iter() -> usize {
    500
}
fn default_grid() -> usize {
    DEFAULT_GRID
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    /// Regression paths.
    pub paths: usize,
    /// Evaluation paths; defaults to `paths`.
    #[serde(default)]
    pub eval_paths: Option<usize>,
    /// Paths of the `L2` error estimate; defaults to `paths`.
    #[serde(default)]
    pub l2_paths: Option<usize>,
    pub dt: f64,
    pub seed: u64,
    pub eval_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Strike {
    Rule(StrikeRule),
    Value(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrikeRule {
    /// The payoff statistic of `y(0)`: the basket value, or the largest asset.
    AtTheMoney,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PricingConfig {
    pub dates: Vec<f64>,
    pub strike: Strike,
    pub payoff: PayoffKind,
    #[serde(default = "default_degree")]
    pub degree: usize,
    #[serde(default = "yes")]
    pub include_payoff: bool,
    /// Discount rate; defaults to the model's `r`.
    #[serde(default)]
    pub rate: Option<f64>,
    #[serde(default = "yes")]
    pub two_pass: bool,
    #[serde(default = "yes")]
    pub itm_only: bool,
}

fn default_degree() -> usize {
    4
}
fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub reduction: ReductionConfig,
    pub simulation: SimulationConfig,
    pub pricing: PricingConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Basket,
    Maxcall,
}

impl ExperimentConfig {
    /// Fifty assets, mixed correlations, unweighted basket call.
    pub fn basket(seed: u64) -> Self {
        let spec = BsSpec::basket();
        ExperimentConfig {
            model: ModelConfig {
                n: spec.n,
                r: spec.r,
                delta: spec.delta,
                xi_range: [spec.xi_range.0, spec.xi_range.1],
                x0_range: [spec.x0_range.0, spec.x0_range.1],
                profile: spec.profile,
                horizon: spec.horizon,
                output: spec.output,
                seed,
            },
            reduction: ReductionConfig {
                nhat: (1..=5).collect(),
                algorithm: Algorithm::FiniteHorizon,
                tol: default_tol(),
                max_iter: default_max_iter(),
                grid: DEFAULT_GRID,
                full_gramians: false,
                seed: seed.wrapping_add(1),
            },
            simulation: SimulationConfig {
                paths: 100_000,
                eval_paths: None,
                l2_paths: None,
                dt: 0.01,
                seed: seed.wrapping_add(2),
                eval_seed: seed.wrapping_add(3),
            },
            pricing: PricingConfig {
                dates: vec![0.0, 0.25, 0.5, 0.75, 1.0],
                strike: Strike::Rule(StrikeRule::AtTheMoney),
                payoff: PayoffKind::BasketCall,
                degree: default_degree(),
                include_payoff: true,
                rate: None,
                two_pass: true,
                itm_only: true,
            },
        }
    }

    /// Fifty highly correlated assets, `C = I`, call on the maximum.
    pub fn maxcall(seed: u64) -> Self {
        let mut cfg = ExperimentConfig::basket(seed);
        let spec = BsSpec::max_call();
        cfg.model.x0_range = [spec.x0_range.0, spec.x0_range.1];
        cfg.model.profile = spec.profile;
        cfg.model.output = spec.output;
        cfg.reduction.nhat = (1..=6).collect();
        cfg.pricing.payoff = PayoffKind::MaxCall;
        cfg
    }

    pub fn preset(p: Preset, seed: u64) -> Self {
        match p {
            Preset::Basket => ExperimentConfig::basket(seed),
            Preset::Maxcall => ExperimentConfig::maxcall(seed),
        }
    }

    pub fn from_toml(text: &str, context: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Parse {
            context: context.into(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(Error::Config(format!("{field}: {msg}")));
        let m = &self.model;
        let range_ok = |r: [f64; 2]| r[0].is_finite() && r[1].is_finite() && r[0] <= r[1];
        if m.n == 0 {
            return bad("model.n", "must be at least 1");
        }
        if !range_ok(m.xi_range) || m.xi_range[0] <= 0.0 {
            return bad("model.xi_range", "must be an ordered pair of positive numbers");
        }
        if !range_ok(m.x0_range) {
            return bad("model.x0_range", "must be an ordered pair");
        }
        if !m.r.is_finite() || !m.delta.is_finite() {
            return bad("model.r/model.delta", "must be finite");
        }
        if !(m.horizon > 0.0 && m.horizon.is_finite()) {
            return bad("model.horizon", "must be positive");
        }
        let r = &self.reduction;
        if r.nhat.is_empty() {
            return bad("reduction.nhat", "must list at least one order");
        }
        if let Some(&k) = r.nhat.iter().find(|&&k| k == 0 || k > m.n) {
            return bad("reduction.nhat", &format!("order {k} outside 1..={}", m.n));
        }
        if !(r.tol > 0.0) {
            return bad("reduction.tol", "must be positive");
        }
        if r.max_iter == 0 {
            return bad("reduction.max_iter", "must be at least 1");
        }
        if r.grid < 2 || r.grid % 2 != 0 {
            return bad("reduction.grid", "must be an even number of at least 2");
        }
        let s = &self.simulation;
        if s.paths < 2 || s.eval_paths.is_some_and(|p| p < 2) || s.l2_paths.is_some_and(|p| p < 2) {
            return bad("simulation.paths", "at least 2 paths are required");
        }
        if !(s.dt > 0.0 && s.dt.is_finite()) {
            return bad("simulation.dt", "must be positive");
        }
        if self.pricing.two_pass && s.seed == s.eval_seed {
            return bad("simulation.eval_seed", "must differ from simulation.seed");
        }
        let p = &self.pricing;
        if p.dates.is_empty() || p.dates.windows(2).any(|w| w[1] <= w[0]) || p.dates[0] < 0.0 {
            return bad("pricing.dates", "must be nonnegative and strictly increasing");
        }
        if let Strike::Value(k) = p.strike {
            if !(k > 0.0) {
                return bad("pricing.strike", "must be positive");
            }
        }
        if p.rate.is_some_and(|r| !r.is_finite()) {
            return bad("pricing.rate", "must be finite");
        }
        Ok(())
    }

    /// SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        io::sha256_hex(self.to_toml().as_bytes())
    }

    /// Provenance record for the outputs of the stream seeded with `seed`.
    pub fn provenance(&self, seed: u64) -> Provenance {
        Provenance::new(self.to_toml().as_bytes(), seed)
    }
}

// ----------------------------------------------------------------------------
// Pipeline stages, shared by the commands and usable from code.

/// A generated Black-Scholes model with its file record.
pub struct GeneratedModel {
    pub inst: models::BsInstance,
    pub file: ModelFile,
}

pub fn generate_model(cfg: &ExperimentConfig) -> Result<GeneratedModel> {
    let spec = cfg.model.bs_spec();
    let inst = models::generate_bs(&spec, cfg.model.seed)?;
    let record = BsRecord {
        spec,
        model_seed: cfg.model.seed,
        xi: inst.xi.iter().copied().collect(),
        x0: inst.x0.iter().copied().collect(),
    };
    let file = ModelFile::new(&inst.sys, &inst.z0, Some(record), cfg.provenance(cfg.model.seed));
    Ok(GeneratedModel { inst, file })
}

/// Off-diagonal correlations `k_ij`, `i < j`, in increasing order.
pub fn sorted_correlations(k: &DMatrix<f64>) -> Vec<f64> {
    let n = k.nrows();
    let mut v: Vec<f64> = (0..n).flat_map(|j| (0..j).map(move |i| (i, j))).map(|(i, j)| k[(i, j)]).collect();
    v.sort_by(f64::total_cmp);
    v
}

/// One entry of an order sweep.
#[derive(Debug, Clone)]
pub struct ReductionRecord {
    pub nhat: usize,
    pub algorithm: Algorithm,
    pub red: ReducedSystem,
    pub diagnostics: ReductionDiagnostics,
    pub seconds: f64,
}

fn diagnostics_level(sys: &SystemCoefficients, cfg: &ReductionConfig) -> DiagnosticsLevel {
    if sys.n() <= FULL_GRAMIAN_MAX_N || cfg.full_gramians {
        DiagnosticsLevel::Full
    } else {
        DiagnosticsLevel::Reduced
    }
}

/// Reduce to each order in `cfg.nhat`. A run that exhausts `max_iter` keeps
/// its best iterate (flagged as not converged); other errors abort the sweep.
/// `each` sees every record as soon as it exists.
pub fn reduce_sweep(
    sys: &SystemCoefficients,
    cfg: &ReductionConfig,
    mut each: impl FnMut(&ReductionRecord) -> Result<()>,
) -> Result<Vec<ReductionRecord>> {
    let opts = FixedPointOptions {
        max_iter: cfg.max_iter,
        tol: cfg.tol,
        grid: cfg.grid,
        seed: cfg.seed,
        diagnostics: diagnostics_level(sys, cfg),
        ..FixedPointOptions::default()
    };
    let mut out = Vec::with_capacity(cfg.nhat.len());
    for &nhat in &cfg.nhat {
        let t = Instant::now();
        let run = match cfg.algorithm {
            Algorithm::FiniteHorizon => mor::sylvester_fixed_point(sys, nhat, &opts),
            Algorithm::InfiniteHorizon => mor::stable_fixed_point(sys, nhat, &opts),
        };
        let r = match run {
            Ok(r) => r,
            Err(Error::NotConverged {
                iterations,
                last_change,
                best,
            }) => {
                warn!("order {nhat}: no convergence after {iterations} iterations (change {last_change:.3e}); keeping best iterate");
                *best
            }
            Err(e) => return Err(e),
        };
        let rec = ReductionRecord {
            nhat,
            algorithm: cfg.algorithm,
            red: r.red,
            diagnostics: r.diagnostics,
            seconds: t.elapsed().as_secs_f64(),
        };
        info!(
            "order {nhat}: {} iterations, converged {}, {:.1}s",
            rec.diagnostics.iterations, rec.diagnostics.converged, rec.seconds
        );
        each(&rec)?;
        out.push(rec);
    }
    Ok(out)
}

pub fn hsv_of_model(sys: &SystemCoefficients, grid: usize, allow_large: bool) -> Result<HsvReport> {
    if sys.n() > FULL_GRAMIAN_MAX_N && !allow_large {
        return Err(Error::Config(format!(
            "n = {} exceeds {FULL_GRAMIAN_MAX_N}; pass --full-gramians to compute the full Gramians",
            sys.n()
        )));
    }
    let needed = covariance::dense_solve_bytes(sys.n() * sys.n());
    if needed > DEFAULT_MEMORY_BUDGET {
        return Err(Error::MemoryBudgetExceeded {
            needed,
            budget: DEFAULT_MEMORY_BUDGET,
        });
    }
    let (p, q) = covariance::full_gramians(sys, grid)?;
    mor::hankel_singular_values(&p, &q)
}

/// Monte Carlo `L2` errors of all reduced systems from one coupled ensemble.
pub fn l2_sweep(
    sys: &SystemCoefficients,
    z0: &InitialExpansion,
    reds: &[ReducedSystem],
    paths: usize,
    dt: f64,
    seed: u64,
) -> Result<Vec<L2Estimate>> {
    let noise = NoiseSpec::from_system(sys)?;
    let opts = SimulationOptions {
        z0: z0.clone(),
        store_reduced_state: false,
        track_l2: true,
        ..SimulationOptions::new(paths, dt, vec![sys.horizon], seed)
    };
    let ens = simulate::simulate_coupled(sys, reds, &noise, &opts)?;
    (0..reds.len()).map(|k| simulate::l2_error_estimate(&ens, k)).collect()
}

/// Exercise dates, rate and strike implied by the pricing config and the model.
pub fn exercise_spec(cfg: &ExperimentConfig, sys: &SystemCoefficients, z0: &InitialExpansion, model_rate: Option<f64>) -> Result<ExerciseSpec> {
    let p = &cfg.pricing;
    let rate = p.rate.or(model_rate).ok_or_else(|| {
        Error::Config("pricing.rate: required for models without Black-Scholes parameters".into())
    })?;
    let strike = match p.strike {
        Strike::Value(k) => k,
        Strike::Rule(StrikeRule::AtTheMoney) => {
            let y0 = &sys.c * sys.initial_state(z0)?;
            match p.payoff {
                PayoffKind::BasketCall => {
                    if y0.len() != 1 {
                        return Err(Error::Config("pricing.payoff: basket_call needs a scalar output".into()));
                    }
                    y0[0]
                }
                PayoffKind::MaxCall => y0.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            }
        }
    };
    let spec = ExerciseSpec {
        dates: p.dates.clone(),
        rate,
        strike,
        payoff_kind: p.payoff,
    };
    spec.validate()?;
    Ok(spec)
}

pub fn price_sweep(
    cfg: &ExperimentConfig,
    sys: &SystemCoefficients,
    z0: &InitialExpansion,
    reds: &[ReducedSystem],
    spec: &ExerciseSpec,
) -> Result<Vec<PricingResult>> {
    if z0.z0.len() != 1 || z0.z0[0] != 1.0 {
        return Err(Error::Config("pricing needs the initial expansion z0 = [1]".into()));
    }
    let noise = NoiseSpec::from_system(sys)?;
    let s = &cfg.simulation;
    let basis = BasisSpec {
        max_total_degree: cfg.pricing.degree,
        include_payoff: cfg.pricing.include_payoff,
    };
    let ls = LsOptions {
        itm_only: cfg.pricing.itm_only,
        two_pass: cfg.pricing.two_pass,
        seed: s.eval_seed,
    };
    let sim = PricingSimulation {
        paths_regress: s.paths,
        paths_eval: s.eval_paths.unwrap_or(s.paths),
        dt: s.dt,
        seed: s.seed,
    };
    pricing::price_reduced_models(sys, reds, &noise, spec, basis, &ls, &sim)
}

// ----------------------------------------------------------------------------
// Output tables.

fn int(v: usize) -> String {
    v.to_string()
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".into(), num)
}

pub fn write_correlations(path: &Path, prov: &Provenance, k: &DMatrix<f64>) -> Result<()> {
    let rows = sorted_correlations(k).into_iter().enumerate().map(|(i, v)| vec![int(i + 1), num(v)]);
    io::write_csv(path, prov, &["rank", "k_ij"], rows)
}

pub fn write_hsv(dir: &Path, prov: &Provenance, h: &HsvReport) -> Result<()> {
    let rows = (0..h.hsv.len()).map(|i| vec![int(i + 1), num(h.hsv[i]), num(h.eig_p[i]), num(h.eig_q[i])]);
    io::write_csv(&dir.join("hsv.csv"), prov, &["index", "sigma", "eig_p", "eig_q"], rows)?;
    let rows = (0..h.hsv.len()).map(|i| vec![int(i + 1), num(h.hsv[i].log10())]);
    io::write_csv(&dir.join("hsv_log.csv"), prov, &["index", "log10_sigma"], rows)
}

pub fn write_covariance_errors(path: &Path, prov: &Provenance, recs: &[ReductionRecord]) -> Result<()> {
    let rows = recs.iter().map(|r| {
        let d = &r.diagnostics;
        let (p, q) = d.terminal_cov_err.map_or((None, None), |(p, q)| (Some(p), Some(q)));
        vec![
            int(r.nhat),
            opt(p),
            opt(q),
            opt(d.bound_value),
            int(d.iterations),
            d.converged.to_string(),
        ]
    });
    io::write_csv(
        path,
        prov,
        &["nhat", "covariance_error", "dual_covariance_error", "error_bound", "iterations", "converged"],
        rows,
    )
}

#[derive(Debug, Clone, Serialize)]
struct ReductionEntry<'a> {
    nhat: usize,
    algorithm: &'static str,
    diagnostics: &'a ReductionDiagnostics,
}

fn write_reduction_report(path: &Path, prov: &Provenance, recs: &[ReductionRecord]) -> Result<()> {
    #[derive(Serialize)]
    struct Report<'a> {
        provenance: &'a Provenance,
        reductions: Vec<ReductionEntry<'a>>,
    }
    let reductions = recs
        .iter()
        .map(|r| ReductionEntry {
            nhat: r.nhat,
            algorithm: r.algorithm.name(),
            diagnostics: &r.diagnostics,
        })
        .collect();
    io::write_json(
        path,
        &Report {
            provenance: prov,
            reductions,
        },
    )
}

pub fn write_l2(path: &Path, prov: &Provenance, recs: &[ReductionRecord], l2: &[L2Estimate]) -> Result<()> {
    let rows = recs.iter().zip(l2).map(|(r, e)| {
        vec![
            int(r.nhat),
            num(e.err),
            num(e.relative()),
            num(e.err_sq_mean),
            num(e.err_sq_stderr),
            opt(r.diagnostics.bound_value),
            num(e.norm_y),
        ]
    });
    io::write_csv(
        path,
        prov,
        &["nhat", "l2_error", "relative_l2_error", "err_sq_mean", "err_sq_stderr", "error_bound", "norm_y"],
        rows,
    )
}

pub fn write_pricing(dir: &Path, prov: &Provenance, spec: &ExerciseSpec, res: &[PricingResult]) -> Result<()> {
    let rows = res.iter().map(|r| {
        vec![
            int(r.nhat),
            num(r.value),
            num(r.stderr),
            num(r.in_sample_value),
            num(r.in_sample_stderr),
            opt(r.pathwise_bound),
            opt(r.pathwise_bound_stderr),
            int(r.basis_count),
        ]
    });
    io::write_csv(
        &dir.join("pricing.csv"),
        prov,
        &[
            "nhat",
            "value",
            "stderr",
            "in_sample_value",
            "in_sample_stderr",
            "pathwise_bound",
            "pathwise_bound_stderr",
            "basis_count",
        ],
        rows,
    )?;
    #[derive(Serialize)]
    struct Report<'a> {
        provenance: &'a Provenance,
        exercise: &'a ExerciseSpec,
        results: &'a [PricingResult],
    }
    io::write_json(
        &dir.join("pricing_report.json"),
        &Report {
            provenance: prov,
            exercise: spec,
            results: res,
        },
    )
}

fn reduced_file_name(nhat: usize) -> String {
    format!("reduced_nhat{nhat}.json")
}

// ----------------------------------------------------------------------------
// Commands.

/// Everything an experiment produced.
pub struct ExperimentOutcome {
    pub model: GeneratedModel,
    pub hsv: Option<HsvReport>,
    pub reductions: Vec<ReductionRecord>,
    pub l2: Vec<L2Estimate>,
    pub exercise: ExerciseSpec,
    pub pricing: Vec<PricingResult>,
}

/// generate, hsv, reduce, L2 errors, pricing; files land in `out` stage by stage.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(out)?;
    let prov = cfg.provenance(cfg.model.seed);
    std::fs::write(out.join("config.toml"), format!("{}{}", prov.header(), cfg.to_toml()))?;

    let model = generate_model(cfg)?;
    io::write_json(&out.join("model.json"), &model.file)?;
    write_correlations(&out.join("correlations.csv"), &prov, &model.inst.k_b)?;
    let sys = &model.inst.sys;
    let z0 = &model.inst.z0;

    let hsv = if diagnostics_level(sys, &cfg.reduction) == DiagnosticsLevel::Full {
        let h = hsv_of_model(sys, cfg.reduction.grid, true)?;
        write_hsv(out, &prov, &h)?;
        info!("leading HSVs: {:?}", &h.hsv.as_slice()[..h.hsv.len().min(4)]);
        Some(h)
    } else {
        warn!("skipping HSVs: n = {} needs --full-gramians", sys.n());
        None
    };

    let mut done = Vec::new();
    let reductions = reduce_sweep(sys, &cfg.reduction, |rec| {
        let f = ReducedFile::new(&rec.red, rec.algorithm.name(), rec.diagnostics.clone(), prov.clone());
        io::write_json(&out.join(reduced_file_name(rec.nhat)), &f)?;
        done.push(rec.clone());
        write_covariance_errors(&out.join("covariance_errors.csv"), &prov, &done)?;
        write_reduction_report(&out.join("reduction_report.json"), &prov, &done)
    })?;
    let reds: Vec<ReducedSystem> = reductions.iter().map(|r| r.red.clone()).collect();

    let s = &cfg.simulation;
    let t = Instant::now();
    let l2 = l2_sweep(sys, z0, &reds, s.l2_paths.unwrap_or(s.paths), s.dt, s.seed)?;
    write_l2(&out.join("l2_errors.csv"), &prov, &reductions, &l2)?;
    info!("L2 errors in {:.1}s", t.elapsed().as_secs_f64());

    let exercise = exercise_spec(cfg, sys, z0, Some(cfg.model.r))?;
    let t = Instant::now();
    let pricing = price_sweep(cfg, sys, z0, &reds, &exercise)?;
    write_pricing(out, &prov, &exercise, &pricing)?;
    info!("pricing in {:.1}s", t.elapsed().as_secs_f64());

    Ok(ExperimentOutcome {
        model,
        hsv,
        reductions,
        l2,
        exercise,
        pricing,
    })
}

#[derive(Debug, Parser)]
#[command(name = "stochmor", version, about = "Model order reduction and Bermudan pricing for linear stochastic asset models")]
pub struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct ConfigArgs {
    /// TOML experiment configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Built-in configuration used when no --config is given.
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// Seed of the command's primary random stream.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// Comma-separated reduced orders.
    #[arg(long, value_delimiter = ',')]
    pub nhat: Option<Vec<usize>>,
    #[arg(long, value_enum)]
    pub algorithm: Option<Algorithm>,
    /// Monte Carlo paths (regression, evaluation and L2 ensembles).
    #[arg(long)]
    pub paths: Option<usize>,
    /// Euler-Maruyama step.
    #[arg(long)]
    pub dt: Option<f64>,
    /// Compute full-order Gramians even for large n.
    #[arg(long)]
    pub full_gramians: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a Black-Scholes model file.
    Generate {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Reduce a model to each requested order.
    Reduce {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Hankel singular values of a model.
    Hsv {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Price a Bermudan option on reduced models.
    Price {
        #[arg(long)]
        model: PathBuf,
        /// Reduced-model files; repeat for several orders.
        #[arg(long, required = true, num_args = 1..)]
        reduced: Vec<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Run a complete experiment.
    Experiment {
        #[arg(value_enum)]
        name: Preset,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

/// Which seed `--seed` replaces.
#[derive(Clone, Copy)]
enum SeedTarget {
    Model,
    Reduction,
    Simulation,
}

fn load_config(args: &ConfigArgs, fallback: Option<Preset>, target: SeedTarget) -> Result<ExperimentConfig> {
    let mut cfg = match (&args.config, args.preset.or(fallback)) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path)?;
            ExperimentConfig::from_toml(&text, &path.display().to_string())?
        }
        (None, Some(p)) => {
            let seed = args
                .seed
                .ok_or_else(|| Error::Config("--seed is required when no --config is given".into()))?;
            ExperimentConfig::preset(p, seed)
        }
        (None, None) => return Err(Error::Config("either --config or --preset is required".into())),
    };
    if let Some(seed) = args.seed {
        match target {
            SeedTarget::Model => cfg.model.seed = seed,
            SeedTarget::Reduction => cfg.reduction.seed = seed,
            SeedTarget::Simulation => cfg.simulation.seed = seed,
        }
    }
    if let Some(nhat) = &args.nhat {
        cfg.reduction.nhat = nhat.clone();
    }
    if let Some(a) = args.algorithm {
        cfg.reduction.algorithm = a;
    }
    if let Some(p) = args.paths {
        cfg.simulation.paths = p;
        cfg.simulation.eval_paths = None;
        cfg.simulation.l2_paths = None;
    }
    if let Some(dt) = args.dt {
        cfg.simulation.dt = dt;
    }
    cfg.reduction.full_gramians |= args.full_gramians;
    cfg.validate()?;
    Ok(cfg)
}

fn load_model(path: &Path) -> Result<(ModelFile, SystemCoefficients, InitialExpansion)> {
    let f = ModelFile::read(path)?;
    let (sys, z0) = f.system()?;
    Ok((f, sys, z0))
}

fn cmd_generate(args: &ConfigArgs) -> Result<()> {
    let cfg = load_config(args, None, SeedTarget::Model)?;
    let m = generate_model(&cfg)?;
    let prov = cfg.provenance(cfg.model.seed);
    io::write_json(&args.out.join("model.json"), &m.file)?;
    write_correlations(&args.out.join("correlations.csv"), &prov, &m.inst.k_b)?;
    Ok(())
}

fn cmd_reduce(model: &Path, args: &ConfigArgs) -> Result<()> {
    let cfg = load_config(args, None, SeedTarget::Reduction)?;
    let (_, sys, _) = load_model(model)?;
    let prov = cfg.provenance(cfg.reduction.seed);
    let mut done = Vec::new();
    reduce_sweep(&sys, &cfg.reduction, |rec| {
        let f = ReducedFile::new(&rec.red, rec.algorithm.name(), rec.diagnostics.clone(), prov.clone());
        io::write_json(&args.out.join(reduced_file_name(rec.nhat)), &f)?;
        done.push(rec.clone());
        write_covariance_errors(&args.out.join("covariance_errors.csv"), &prov, &done)?;
        write_reduction_report(&args.out.join("reduction_report.json"), &prov, &done)
    })?;
    Ok(())
}

fn cmd_hsv(model: &Path, args: &ConfigArgs) -> Result<()> {
    let (file, sys, _) = load_model(model)?;
    let grid = match (&args.config, args.preset) {
        (None, None) => DEFAULT_GRID,
        _ => load_config(args, None, SeedTarget::Model)?.reduction.grid,
    };
    let h = hsv_of_model(&sys, grid, args.full_gramians)?;
    let prov = Provenance {
        seed: args.seed.unwrap_or(file.provenance.seed),
        ..file.provenance.clone()
    };
    write_hsv(&args.out, &prov, &h)
}

fn cmd_price(model: &Path, reduced: &[PathBuf], args: &ConfigArgs) -> Result<()> {
    let cfg = load_config(args, None, SeedTarget::Simulation)?;
    let (file, sys, z0) = load_model(model)?;
    let reds = reduced
        .iter()
        .map(|p| ReducedFile::read(p)?.reduced(&sys))
        .collect::<Result<Vec<_>>>()?;
    let rate = file.black_scholes.as_ref().map(|b| b.spec.r);
    let spec = exercise_spec(&cfg, &sys, &z0, rate)?;
    let res = price_sweep(&cfg, &sys, &z0, &reds, &spec)?;
    write_pricing(&args.out, &cfg.provenance(cfg.simulation.seed), &spec, &res)
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Generate { cfg } => cmd_generate(cfg),
        Command::Reduce { model, cfg } => cmd_reduce(model, cfg),
        Command::Hsv { model, cfg } => cmd_hsv(model, cfg),
        Command::Price { model, reduced, cfg } => cmd_price(model, reduced, cfg),
        Command::Experiment { name, cfg } => {
            let c = load_config(cfg, Some(*name), SeedTarget::Model)?;
            run_experiment(&c, &cfg.out).map(|_| ())
        }
    }
}

/// Parse `args`, run the command and return the process exit status:
/// `0` on success, `1` for usage errors, [`Error::exit_code`] otherwise.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.threads {
        Some(t) => par::with_threads(t, || dispatch(&cli)).and_then(|r| r),
        None => dispatch(&cli),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_round_trips_through_toml() {
        let cfg = ExperimentConfig::maxcall(3);
        let back = ExperimentConfig::from_toml(&cfg.to_toml(), "preset").unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn missing_seed_is_a_parse_error_with_context() {
        let text = ExperimentConfig::basket(1).to_toml().replace("seed = 1\n", "");
        match ExperimentConfig::from_toml(&text, "cfg.toml") {
            Err(Error::Parse { context, message }) => {
                assert_eq!(context, "cfg.toml");
                assert!(message.contains("seed"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn validation_names_the_field() {
        let mut cfg = ExperimentConfig::basket(1);
        cfg.reduction.nhat = vec![0];
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("reduction.nhat"), "{msg}");
    }

    #[test]
    fn sorted_correlations_are_upper_triangle() {
        let k = DMatrix::from_row_slice(3, 3, &[1.0, 0.5, 0.2, 0.5, 1.0, 0.9, 0.2, 0.9, 1.0]);
        assert_eq!(sorted_correlations(&k), vec![0.2, 0.5, 0.9]);
    }

    #[test]
    fn usage_errors_exit_with_one() {
        assert_eq!(run(["stochmor", "frobnicate"]), 1);
        assert_eq!(run(["stochmor", "generate"]), 29);
    }
}
