//! Monte Carlo simulation of the full system and any number of reduced
//! systems driven by common noise increments, including capped CIR
//! (Heston-type) volatility, plus the estimators built on the ensembles.
//!
//! Every path draws its randomness from [`par::path_rng`]`(seed, index)`, so
//! an ensemble is bit-identical for any number of worker threads.

use nalgebra::DMatrix;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, CheckedLu};
use crate::linsys::{InitialExpansion, ReducedSystem, SystemCoefficients};
use crate::par;

/// Default Euler step for a unit horizon.
pub const DEFAULT_DT: f64 = 1.0 / 500.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Brownian,
    /// `K(t) = v(t) K` with one capped CIR factor.
    CappedCirScalar,
    /// `K(t) = diag(v_1(t), ..., v_q(t))`, one capped CIR factor per driver.
    CappedCirDiagonal,
}

/// `dv = kappa (theta - v+) dt + sigma sqrt(v+) dW`, used as `min(v+, cap)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CirParams {
    pub kappa: f64,
    pub theta: f64,
    pub sigma: f64,
    pub v0: f64,
    pub cap: Option<f64>,
}

impl CirParams {
    /// `sigma = 0`, `v0 = theta = cap = c`: the volatility stays at `c`.
    pub fn constant(c: f64) -> Self {
        CirParams {
            kappa: 1.0,
            theta: c,
            sigma: 0.0,
            v0: c,
            cap: Some(c),
        }
    }

    fn cap(&self) -> Result<f64> {
        match self.cap {
            Some(c) if c > 0.0 && c.is_finite() => Ok(c),
            Some(c) => Err(Error::Config(format!("cap must be positive, got {c}"))),
            None => Err(Error::CapMissing),
        }
    }

    fn validate(&self) -> Result<()> {
        self.cap()?;
        let ok = [self.kappa, self.theta, self.sigma, self.v0]
            .iter()
            .all(|v| v.is_finite() && *v >= 0.0);
        if !ok {
            return Err(Error::Config("CIR parameters must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

/// Driving noise: covariance, its factor and optional CIR volatility.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    /// Constant covariance `K` (Brownian and scalar CIR); identity for the
    /// diagonal CIR kind.
    pub k_m: DMatrix<f64>,
    /// `chol chol^T = K`; lower triangular when `K` is positive definite.
    pub chol: DMatrix<f64>,
    pub cir: Vec<CirParams>,
}

fn factor(k: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if k.nrows() != k.ncols() || k.is_empty() {
        return Err(Error::DimensionMismatch("noise covariance must be square".into()));
    }
    if !linalg::is_psd(k, 1e-12) {
        let (min_eig, max_eig) = linalg::sym_eig_extremes(k);
        return Err(Error::NotPositiveSemidefinite { min_eig, max_eig });
    }
    let sym = linalg::symmetrize(k);
    Ok(match sym.clone().cholesky() {
        Some(c) => c.l(),
        None => linalg::psd_factor(&sym),
    })
}

impl NoiseSpec {
    pub fn brownian(k_m: &DMatrix<f64>) -> Result<Self> {
        Ok(NoiseSpec {
            kind: NoiseKind::Brownian,
            k_m: k_m.clone(),
            chol: factor(k_m)?,
            cir: Vec::new(),
        })
    }

    /// Brownian noise with the system's own covariance.
    pub fn from_system(sys: &SystemCoefficients) -> Result<Self> {
        Self::brownian(&sys.k_m)
    }

    pub fn capped_cir_scalar(k: &DMatrix<f64>, cir: CirParams) -> Result<Self> {
        cir.validate()?;
        Ok(NoiseSpec {
            kind: NoiseKind::CappedCirScalar,
            k_m: k.clone(),
            chol: factor(k)?,
            cir: vec![cir],
        })
    }

    pub fn capped_cir_diagonal(cir: Vec<CirParams>) -> Result<Self> {
        if cir.is_empty() {
            return Err(Error::Config("diagonal CIR noise needs at least one factor".into()));
        }
        for c in &cir {
            c.validate()?;
        }
        let q = cir.len();
        Ok(NoiseSpec {
            kind: NoiseKind::CappedCirDiagonal,
            k_m: DMatrix::identity(q, q),
            chol: DMatrix::identity(q, q),
            cir,
        })
    }

    pub fn q(&self) -> usize {
        self.k_m.nrows()
    }

    /// Constant covariance that dominates `K(t)` for all `t`: `K` itself,
    /// `c K`, or `diag(c_1, ..., c_q)`. Gramians of the system with this
    /// covariance bound the capped-volatility covariances.
    pub fn dominating_covariance(&self) -> DMatrix<f64> {
        match self.kind {
            NoiseKind::Brownian => self.k_m.clone(),
            NoiseKind::CappedCirScalar => &self.k_m * self.cir[0].cap.unwrap_or(1.0),
            NoiseKind::CappedCirDiagonal => {
                DMatrix::from_fn(self.q(), self.q(), |i, j| if i == j { self.cir[i].cap.unwrap_or(1.0) } else { 0.0 })
            }
        }
    }
}

/// Which scalar of the output vector is recorded at observation dates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputStatistic {
    /// The single output of a `p = 1` system.
    Scalar,
    /// Largest component of the output vector.
    Max,
}

impl OutputStatistic {
    fn apply(self, y: &[f64]) -> f64 {
        match self {
            OutputStatistic::Scalar => y[0],
            OutputStatistic::Max => y.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    EulerMaruyama,
    ExactGbmFull,
}

/// What to simulate and what to keep.
#[derive(Debug, Clone)]
pub struct SimulationOptions {
    pub paths: usize,
    pub dt: f64,
    /// Observation dates, strictly increasing, multiples of `dt`.
    pub observe: Vec<f64>,
    pub seed: u64,
    pub z0: InitialExpansion,
    /// Keep full states at the observation dates.
    pub store_full_state: bool,
    /// Keep reduced states at the observation dates.
    pub store_reduced_state: bool,
    /// Record this statistic of `y = C x` and `y-hat = C-hat x-hat` at the dates.
    pub statistic: Option<OutputStatistic>,
    /// Accumulate `int ||y||^2 dt` and `int ||y - y-hat||^2 dt` per path
    /// (trapezoid rule on the step grid).
    pub track_l2: bool,
}

impl SimulationOptions {
    pub fn new(paths: usize, dt: f64, observe: Vec<f64>, seed: u64) -> Self {
        SimulationOptions {
            paths,
            dt,
            observe,
            seed,
            z0: InitialExpansion::unit(),
            store_full_state: false,
            store_reduced_state: true,
            statistic: None,
            track_l2: false,
        }
    }
}

/// Reduced-side data of an ensemble.
#[derive(Debug, Clone)]
pub struct ReducedPaths {
    pub nhat: usize,
    /// `[path][date][component]`, when stored.
    pub xhat: Vec<f64>,
    /// `[path][date]`, when a statistic was requested.
    pub stat: Vec<f64>,
    /// Per-path `int ||y - y-hat||^2 dt`, when tracked.
    pub err_sq: Vec<f64>,
}

/// Coupled trajectories at the observation dates.
#[derive(Debug, Clone)]
pub struct PathEnsemble {
    pub paths: usize,
    pub dt: f64,
    pub times: Vec<f64>,
    pub seed: u64,
    pub scheme: Scheme,
    pub n: usize,
    /// Full states `[path][date][component]`, when stored.
    pub x_paths: Vec<f64>,
    /// Statistic of the full output `[path][date]`, when requested.
    pub stat: Vec<f64>,
    /// Per-path `int ||y||^2 dt`, when tracked.
    pub norm_sq: Vec<f64>,
    pub reduced: Vec<ReducedPaths>,
}

impl PathEnsemble {
    pub fn dates(&self) -> usize {
        self.times.len()
    }

    pub fn has_full_state(&self) -> bool {
        !self.x_paths.is_empty()
    }

    pub fn x(&self, path: usize, date: usize) -> &[f64] {
        let start = (path * self.dates() + date) * self.n;
        &self.x_paths[start..start + self.n]
    }

    pub fn xhat(&self, k: usize, path: usize, date: usize) -> &[f64] {
        let r = &self.reduced[k];
        let start = (path * self.dates() + date) * r.nhat;
        &r.xhat[start..start + r.nhat]
    }

    pub fn stat(&self, path: usize, date: usize) -> f64 {
        self.stat[path * self.dates() + date]
    }

    pub fn stat_hat(&self, k: usize, path: usize, date: usize) -> f64 {
        self.reduced[k].stat[path * self.dates() + date]
    }
}

/// Entries `(matrix, row, col, value)` of the `N_i`, skipping zeros.
#[derive(Debug, Clone)]
struct NoiseTensor {
    entries: Vec<(u32, u32, u32, f64)>,
    /// `N_i = d_i e_i e_i^T` for all `i` (Black-Scholes structure).
    diagonal: Option<Vec<f64>>,
}

impl NoiseTensor {
    fn new(noise: &[DMatrix<f64>]) -> Self {
        let mut entries = Vec::new();
        for (k, m) in noise.iter().enumerate() {
            for i in 0..m.nrows() {
                for j in 0..m.ncols() {
                    let v = m[(i, j)];
                    if v != 0.0 {
                        entries.push((k as u32, i as u32, j as u32, v));
                    }
                }
            }
        }
        let n = noise.first().map_or(0, |m| m.nrows());
        let diagonal = (noise.len() == n && entries.iter().all(|&(k, i, j, _)| k == i && i == j))
            .then(|| noise.iter().enumerate().map(|(i, m)| m[(i, i)]).collect());
        NoiseTensor { entries, diagonal }
    }

    /// `acc += sum_i db_i N_i x`
    #[inline]
    fn apply_add(&self, x: &[f64], db: &[f64], acc: &mut [f64]) {
        if let Some(d) = &self.diagonal {
            for (((a, v), x), b) in acc.iter_mut().zip(d).zip(x).zip(db) {
                *a += v * x * b;
            }
            return;
        }
        for &(k, i, j, v) in &self.entries {
            acc[i as usize] += v * x[j as usize] * db[k as usize];
        }
    }
}

/// Row-major sparse matrix, zeros dropped.
#[derive(Debug, Clone)]
struct Sparse {
    rows: usize,
    entries: Vec<(u32, u32, f64)>,
}

impl Sparse {
    fn new(m: &DMatrix<f64>, scale: f64) -> Self {
        let mut entries = Vec::new();
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                let v = m[(i, j)];
                if v != 0.0 {
                    entries.push((i as u32, j as u32, v * scale));
                }
            }
        }
        Sparse {
            rows: m.nrows(),
            entries,
        }
    }

    #[inline]
    fn apply(&self, x: &[f64], out: &mut [f64]) {
        out[..self.rows].fill(0.0);
        for &(i, j, v) in &self.entries {
            out[i as usize] += v * x[j as usize];
        }
    }
}

/// How the noise term of a reduced system is evaluated.
#[derive(Debug, Clone)]
enum ReducedNoise {
    /// `sum_i db_i N-hat_i x-hat` from the reduced matrices.
    Direct(NoiseTensor),
    /// `L sum_i db_i N_i (V x-hat)` with `L = (W^T V)^{-1} W^T`, cheaper when
    /// the full `N_i` are sparse.
    /// `l` column-major (`nhat` per column), `v` row-major (`nhat` per row).
    Factored { l: Vec<f64>, v: Vec<f64> },
}

#[derive(Debug, Clone)]
struct DynamicsStep {
    drift: Sparse,
    output: Sparse,
}

#[derive(Debug, Clone)]
struct ReducedStepper {
    dim: usize,
    dyn_: DynamicsStep,
    noise: ReducedNoise,
    x0: Vec<f64>,
}

fn factored_form(sys: &SystemCoefficients, red: &ReducedSystem) -> Option<DMatrix<f64>> {
    let wtv = red.w.transpose() * &red.v;
    let lu = CheckedLu::new(&wtv)?;
    let l = lu.solve_matrix(&red.w.transpose());
    for (n_hat, n_full) in red.noise.iter().zip(&sys.noise) {
        let rebuilt = &l * n_full * &red.v;
        let scale = rebuilt.norm().max(n_hat.norm());
        if (&rebuilt - n_hat).norm() > 1e-12 * scale {
            return None;
        }
    }
    Some(l)
}

fn reduced_stepper(sys: &SystemCoefficients, red: &ReducedSystem, z0: &InitialExpansion, full_nnz: usize, dt: f64) -> Result<ReducedStepper> {
    let nhat = red.nhat();
    if red.noise.len() != sys.q() || red.v.nrows() != sys.n() || red.c.nrows() != sys.p() || red.x0.ncols() != sys.m() {
        return Err(Error::DimensionMismatch("reduced system does not match the full system".into()));
    }
    let direct = NoiseTensor::new(&red.noise);
    let factored_cost = full_nnz + 2 * sys.n() * nhat;
    let noise = match factored_form(sys, red) {
        Some(l) if factored_cost < direct.entries.len() => ReducedNoise::Factored {
            l: l.as_slice().to_vec(),
            v: red.v.transpose().as_slice().to_vec(),
        },
        _ => ReducedNoise::Direct(direct),
    };
    let x0 = &red.x0 * &z0.z0;
    Ok(ReducedStepper {
        dim: nhat,
        dyn_: DynamicsStep {
            drift: Sparse::new(&red.a, dt),
            output: Sparse::new(&red.c, 1.0),
        },
        noise,
        x0: x0.iter().copied().collect(),
    })
}

fn check_dates(observe: &[f64]) -> Result<f64> {
    if observe.is_empty() {
        return Err(Error::Config("at least one observation date is required".into()));
    }
    let mut prev = 0.0;
    let mut min_gap = f64::INFINITY;
    for (i, &t) in observe.iter().enumerate() {
        if !(t >= 0.0 && t.is_finite()) || (i > 0 && t <= prev) {
            return Err(Error::Config("observation dates must be nonnegative and strictly increasing".into()));
        }
        if t > 0.0 {
            min_gap = min_gap.min(t - prev);
        }
        prev = t;
    }
    Ok(min_gap)
}

/// Dates as step indices.
fn date_steps(observe: &[f64], dt: f64) -> Result<Vec<usize>> {
    let min_gap = check_dates(observe)?;
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::Config(format!("time step must be positive, got {dt}")));
    }
    if dt > min_gap * (1.0 + 1e-12) {
        return Err(Error::StepTooCoarse { dt, gap: min_gap });
    }
    observe
        .iter()
        .map(|&t| {
            let k = (t / dt).round();
            if (k * dt - t).abs() > 1e-9 * t.max(1.0) {
                Err(Error::Config(format!("observation date {t} is not a multiple of dt = {dt}")))
            } else {
                Ok(k as usize)
            }
        })
        .collect()
}

struct Model<'a> {
    n: usize,
    q: usize,
    full: DynamicsStep,
    full_noise: NoiseTensor,
    x0: Vec<f64>,
    reds: Vec<ReducedStepper>,
    noise: &'a NoiseSpec,
    /// `sqrt(dt) chol`, column-major.
    chol_dt: Vec<f64>,
    chol_diag: bool,
    chol_lower: bool,
    sqrt_dt: f64,
    dt: f64,
    steps: Vec<usize>,
    opts: &'a SimulationOptions,
}

/// Output buffers of one chunk of paths.
struct ChunkOut {
    x: Vec<f64>,
    stat: Vec<f64>,
    norm_sq: Vec<f64>,
    xhat: Vec<Vec<f64>>,
    stat_hat: Vec<Vec<f64>>,
    err_sq: Vec<Vec<f64>>,
}

struct Workspace {
    x: Vec<f64>,
    drift: Vec<f64>,
    acc: Vec<f64>,
    zeta: Vec<f64>,
    db: Vec<f64>,
    v: Vec<f64>,
    y: Vec<f64>,
    yhat: Vec<f64>,
    xh: Vec<Vec<f64>>,
    dh: Vec<Vec<f64>>,
    acch: Vec<Vec<f64>>,
    vx: Vec<f64>,
    accf: Vec<f64>,
    prev_norm: f64,
    prev_err: Vec<f64>,
    cur_err: Vec<f64>,
}

impl<'a> Model<'a> {
    fn workspace(&self) -> Workspace {
        let n = self.n;
        let p = self.full.output.rows;
        Workspace {
            x: vec![0.0; n],
            drift: vec![0.0; n],
            acc: vec![0.0; n],
            zeta: vec![0.0; self.q],
            db: vec![0.0; self.q],
            v: self.noise.cir.iter().map(|c| c.v0).collect(),
            y: vec![0.0; p],
            yhat: vec![0.0; p],
            xh: self.reds.iter().map(|r| vec![0.0; r.dim]).collect(),
            dh: self.reds.iter().map(|r| vec![0.0; r.dim]).collect(),
            acch: self.reds.iter().map(|r| vec![0.0; r.dim]).collect(),
            vx: vec![0.0; n],
            accf: vec![0.0; n],
            prev_norm: 0.0,
            prev_err: vec![0.0; self.reds.len()],
            cur_err: vec![0.0; self.reds.len()],
        }
    }

    fn increments(&self, ws: &mut Workspace, rng: &mut ChaCha8Rng) {
        for z in ws.zeta.iter_mut() {
            *z = StandardNormal.sample(rng);
        }
        let q = self.q;
        if self.chol_diag {
            for i in 0..q {
                ws.db[i] = self.chol_dt[i * q + i] * ws.zeta[i];
            }
        } else {
            ws.db.fill(0.0);
            for j in 0..q {
                let start = if self.chol_lower { j } else { 0 };
                let z = ws.zeta[j];
                let col = &self.chol_dt[j * q + start..(j + 1) * q];
                for (d, c) in ws.db[start..].iter_mut().zip(col) {
                    *d += c * z;
                }
            }
        }
        match self.noise.kind {
            NoiseKind::Brownian => {}
            NoiseKind::CappedCirScalar => {
                let c = &self.noise.cir[0];
                let eff = ws.v[0].max(0.0).min(c.cap.unwrap_or(f64::INFINITY)).sqrt();
                for d in ws.db.iter_mut() {
                    *d *= eff;
                }
            }
            NoiseKind::CappedCirDiagonal => {
                for (j, c) in self.noise.cir.iter().enumerate() {
                    ws.db[j] *= ws.v[j].max(0.0).min(c.cap.unwrap_or(f64::INFINITY)).sqrt();
                }
            }
        }
        // full-truncation Euler step of the CIR factors
        for (j, c) in self.noise.cir.iter().enumerate() {
            let vp = ws.v[j].max(0.0);
            let eta: f64 = StandardNormal.sample(rng);
            ws.v[j] += c.kappa * (c.theta - vp) * self.dt + c.sigma * vp.sqrt() * self.sqrt_dt * eta;
        }
    }

    /// `||y||^2` and `||y - y-hat_k||^2` into `ws.cur_err`.
    fn outputs(&self, ws: &mut Workspace) -> f64 {
        self.full.output.apply(&ws.x, &mut ws.y);
        let norm = ws.y.iter().map(|v| v * v).sum::<f64>();
        for (k, r) in self.reds.iter().enumerate() {
            r.dyn_.output.apply(&ws.xh[k], &mut ws.yhat);
            ws.cur_err[k] = ws.y.iter().zip(&ws.yhat).map(|(a, b)| (a - b) * (a - b)).sum();
        }
        norm
    }

    fn record(&self, ws: &mut Workspace, out: &mut ChunkOut) {
        let opts = self.opts;
        if opts.store_full_state {
            out.x.extend_from_slice(&ws.x);
        }
        if let Some(s) = opts.statistic {
            self.full.output.apply(&ws.x, &mut ws.y);
            out.stat.push(s.apply(&ws.y));
        }
        for (k, r) in self.reds.iter().enumerate() {
            if opts.store_reduced_state {
                out.xhat[k].extend_from_slice(&ws.xh[k]);
            }
            if let Some(s) = opts.statistic {
                r.dyn_.output.apply(&ws.xh[k], &mut ws.yhat);
                out.stat_hat[k].push(s.apply(&ws.yhat));
            }
        }
    }

    fn path(&self, index: usize, ws: &mut Workspace, out: &mut ChunkOut) {
        let mut rng = par::path_rng(self.opts.seed, index as u64);
        ws.x.copy_from_slice(&self.x0);
        for (k, r) in self.reds.iter().enumerate() {
            ws.xh[k].copy_from_slice(&r.x0);
        }
        for (j, c) in self.noise.cir.iter().enumerate() {
            ws.v[j] = c.v0;
        }
        let track = self.opts.track_l2;
        let (mut int_norm, mut int_err) = (0.0, vec![0.0; self.reds.len()]);
        if track {
            ws.prev_norm = self.outputs(ws);
            ws.prev_err.copy_from_slice(&ws.cur_err);
        }
        let last = *self.steps.last().expect("dates checked");
        let mut next_date = 0;
        let half_dt = 0.5 * self.dt;
        for step in 0..=last {
            while next_date < self.steps.len() && self.steps[next_date] == step {
                self.record(ws, out);
                next_date += 1;
            }
            if step == last {
                break;
            }
            self.increments(ws, &mut rng);
            // full system
            self.full.drift.apply(&ws.x, &mut ws.drift);
            ws.acc.fill(0.0);
            self.full_noise.apply_add(&ws.x, &ws.db, &mut ws.acc);
            for k in 0..self.reds.len() {
                let r = &self.reds[k];
                r.dyn_.drift.apply(&ws.xh[k], &mut ws.dh[k]);
                let acch = &mut ws.acch[k];
                acch.fill(0.0);
                match &r.noise {
                    ReducedNoise::Direct(t) => t.apply_add(&ws.xh[k], &ws.db, acch),
                    ReducedNoise::Factored { l, v } => {
                        let d = r.dim;
                        let xh = &ws.xh[k];
                        for (vx, row) in ws.vx.iter_mut().zip(v.chunks_exact(d)) {
                            *vx = row.iter().zip(xh).map(|(a, b)| a * b).sum();
                        }
                        ws.accf.fill(0.0);
                        self.full_noise.apply_add(&ws.vx, &ws.db, &mut ws.accf);
                        for (&a, col) in ws.accf.iter().zip(l.chunks_exact(d)) {
                            if a != 0.0 {
                                for (h, lv) in acch.iter_mut().zip(col) {
                                    *h += lv * a;
                                }
                            }
                        }
                    }
                }
                let xh = &mut ws.xh[k];
                for i in 0..r.dim {
                    xh[i] = xh[i] + ws.dh[k][i] + acch[i];
                }
            }
            for i in 0..self.n {
                ws.x[i] = ws.x[i] + ws.drift[i] + ws.acc[i];
            }
            if track {
                let nm = self.outputs(ws);
                int_norm += half_dt * (ws.prev_norm + nm);
                ws.prev_norm = nm;
                for k in 0..self.reds.len() {
                    int_err[k] += half_dt * (ws.prev_err[k] + ws.cur_err[k]);
                    ws.prev_err[k] = ws.cur_err[k];
                }
            }
        }
        if track {
            out.norm_sq.push(int_norm);
            for (k, e) in int_err.into_iter().enumerate() {
                out.err_sq[k].push(e);
            }
        }
    }
}

fn check_noise(sys: &SystemCoefficients, noise: &NoiseSpec) -> Result<()> {
    if noise.q() != sys.q() {
        return Err(Error::DimensionMismatch(format!(
            "noise has {} drivers, system has {}",
            noise.q(),
            sys.q()
        )));
    }
    if noise.kind != NoiseKind::Brownian {
        if noise.cir.is_empty() {
            return Err(Error::CapMissing);
        }
        for c in &noise.cir {
            c.validate()?;
        }
        if noise.kind == NoiseKind::CappedCirDiagonal && noise.cir.len() != noise.q() {
            return Err(Error::DimensionMismatch("one CIR factor per driver is required".into()));
        }
    }
    Ok(())
}

/// Euler-Maruyama for the full system and every reduced system, all driven
/// by the same increments `dB = chol sqrt(dt) zeta` (scaled by `sqrt(v)`
/// under CIR volatility).
pub fn simulate_coupled(
    sys: &SystemCoefficients,
    reds: &[ReducedSystem],
    noise: &NoiseSpec,
    opts: &SimulationOptions,
) -> Result<PathEnsemble> {
    check_noise(sys, noise)?;
    if opts.paths == 0 {
        return Err(Error::Config("at least one path is required".into()));
    }
    if opts.statistic == Some(OutputStatistic::Scalar) && sys.p() != 1 {
        return Err(Error::DimensionMismatch("scalar statistic needs a single output".into()));
    }
    let steps = date_steps(&opts.observe, opts.dt)?;
    let x0 = sys.initial_state(&opts.z0)?;
    let full_noise = NoiseTensor::new(&sys.noise);
    let full_nnz = full_noise.entries.len();
    let reds = reds
        .iter()
        .map(|r| reduced_stepper(sys, r, &opts.z0, full_nnz, opts.dt))
        .collect::<Result<Vec<_>>>()?;
    let sqrt_dt = opts.dt.sqrt();
    let q = noise.q();
    let chol_dt = (&noise.chol * sqrt_dt).as_slice().to_vec();
    let chol_diag = (0..q).all(|i| (0..q).all(|j| i == j || noise.chol[(i, j)] == 0.0));
    let chol_lower = (0..q).all(|i| (i + 1..q).all(|j| noise.chol[(i, j)] == 0.0));
    let model = Model {
        n: sys.n(),
        q: sys.q(),
        full: DynamicsStep {
            drift: Sparse::new(&sys.a, opts.dt),
            output: Sparse::new(&sys.c, 1.0),
        },
        full_noise,
        x0: x0.iter().copied().collect(),
        reds,
        noise,
        chol_dt,
        chol_diag,
        chol_lower,
        sqrt_dt,
        dt: opts.dt,
        steps,
        opts,
    };
    let nred = model.reds.len();
    let chunks = par::map_chunks(opts.paths, |range| {
        let mut ws = model.workspace();
        let mut out = ChunkOut {
            x: Vec::new(),
            stat: Vec::new(),
            norm_sq: Vec::new(),
            xhat: vec![Vec::new(); nred],
            stat_hat: vec![Vec::new(); nred],
            err_sq: vec![Vec::new(); nred],
        };
        for i in range {
            model.path(i, &mut ws, &mut out);
        }
        out
    });
    let mut ens = PathEnsemble {
        paths: opts.paths,
        dt: opts.dt,
        times: opts.observe.clone(),
        seed: opts.seed,
        scheme: Scheme::EulerMaruyama,
        n: sys.n(),
        x_paths: Vec::new(),
        stat: Vec::new(),
        norm_sq: Vec::new(),
        reduced: model
            .reds
            .iter()
            .map(|r| ReducedPaths {
                nhat: r.dim,
                xhat: Vec::new(),
                stat: Vec::new(),
                err_sq: Vec::new(),
            })
            .collect(),
    };
    for c in chunks {
        ens.x_paths.extend_from_slice(&c.x);
        ens.stat.extend_from_slice(&c.stat);
        ens.norm_sq.extend_from_slice(&c.norm_sq);
        for (k, r) in ens.reduced.iter_mut().enumerate() {
            r.xhat.extend_from_slice(&c.xhat[k]);
            r.stat.extend_from_slice(&c.stat_hat[k]);
            r.err_sq.extend_from_slice(&c.err_sq[k]);
        }
    }
    Ok(ens)
}

/// [`simulate_coupled`] for capped CIR volatility; rejects Brownian noise
/// and missing caps.
pub fn simulate_heston(
    sys: &SystemCoefficients,
    reds: &[ReducedSystem],
    noise: &NoiseSpec,
    opts: &SimulationOptions,
) -> Result<PathEnsemble> {
    if noise.kind == NoiseKind::Brownian || noise.cir.is_empty() {
        return Err(Error::CapMissing);
    }
    simulate_coupled(sys, reds, noise, opts)
}

/// Exact lognormal sampling of a diagonal Black-Scholes model,
/// `x_i(t) = x_i(0) exp((a_i - xi_i^2 k_ii / 2) t + xi_i B_i(t))`.
///
/// With `dt = Some(h)` the Brownian path is built from the same per-step
/// increments (and random stream) that [`simulate_coupled`] uses for
/// Brownian noise, so both schemes can be compared path by path.
pub fn exact_gbm_paths(
    sys: &SystemCoefficients,
    paths: usize,
    observe: &[f64],
    dt: Option<f64>,
    seed: u64,
) -> Result<PathEnsemble> {
    if !sys.is_diagonal_bs() {
        return Err(Error::NotDiagonalModel);
    }
    if paths == 0 {
        return Err(Error::Config("at least one path is required".into()));
    }
    let n = sys.n();
    let xi: Vec<f64> = (0..n).map(|i| sys.noise[i][(i, i)]).collect();
    let drift: Vec<f64> = (0..n).map(|i| sys.a[(i, i)] - 0.5 * xi[i] * xi[i] * sys.k_m[(i, i)]).collect();
    let x0 = sys.initial_state(&InitialExpansion::unit())?;
    let chol = factor(&sys.k_m)?;
    // piecewise step sizes between consecutive dates
    let schedule: Vec<(usize, f64)> = match dt {
        Some(h) => {
            let steps = date_steps(observe, h)?;
            let mut prev = 0;
            steps
                .iter()
                .map(|&s| {
                    let r = (s - prev, h);
                    prev = s;
                    r
                })
                .collect()
        }
        None => {
            check_dates(observe)?;
            let mut prev = 0.0;
            observe
                .iter()
                .map(|&t| {
                    let r = (usize::from(t > prev), t - prev);
                    prev = t;
                    r
                })
                .collect()
        }
    };
    let chunks = par::map_chunks(paths, |range| {
        let mut out = Vec::with_capacity(range.len() * observe.len() * n);
        let mut b = vec![0.0; n];
        let mut zeta = vec![0.0; n];
        for p in range {
            let mut rng = par::path_rng(seed, p as u64);
            b.fill(0.0);
            let mut t = 0.0;
            for &(count, h) in &schedule {
                let sh = h.sqrt();
                for _ in 0..count {
                    for z in zeta.iter_mut() {
                        *z = StandardNormal.sample(&mut rng);
                    }
                    for i in 0..n {
                        let mut s = 0.0;
                        for j in 0..n {
                            s += chol[(i, j)] * zeta[j];
                        }
                        b[i] += sh * s;
                    }
                    t += h;
                }
                for i in 0..n {
                    out.push(x0[i] * (drift[i] * t + xi[i] * b[i]).exp());
                }
            }
        }
        out
    });
    let mut x_paths = Vec::with_capacity(paths * observe.len() * n);
    for c in chunks {
        x_paths.extend_from_slice(&c);
    }
    Ok(PathEnsemble {
        paths,
        dt: dt.unwrap_or(0.0),
        times: observe.to_vec(),
        seed,
        scheme: Scheme::ExactGbmFull,
        n,
        x_paths,
        stat: Vec::new(),
        norm_sq: Vec::new(),
        reduced: Vec::new(),
    })
}

/// Monte Carlo estimate of `E[x(t) x(t)^T]` at one date with entrywise
/// standard errors.
#[derive(Debug, Clone)]
pub struct MomentEstimate {
    pub time: f64,
    pub mean: DMatrix<f64>,
    pub stderr: DMatrix<f64>,
}

fn moment<F>(paths: usize, rows: usize, cols: usize, time: f64, sample: F) -> MomentEstimate
where
    F: Fn(usize, &mut DMatrix<f64>) + Sync,
{
    let zero = (DMatrix::zeros(rows, cols), DMatrix::zeros(rows, cols));
    let (sum, sum_sq) = par::reduce_chunks(
        paths,
        zero.clone(),
        |range| {
            let (mut s, mut s2) = zero.clone();
            let mut outer = DMatrix::zeros(rows, cols);
            for p in range {
                sample(p, &mut outer);
                s += &outer;
                s2 += outer.component_mul(&outer);
            }
            (s, s2)
        },
        |(a, b), (c, d)| (a + c, b + d),
    );
    let m = paths as f64;
    let mean = &sum / m;
    let var = (sum_sq / m - mean.component_mul(&mean)).map(|v| v.max(0.0)) * (m / (m - 1.0).max(1.0));
    MomentEstimate {
        time,
        mean,
        stderr: var.map(|v| (v / m).sqrt()),
    }
}

/// Empirical second moments of the full state at every observation date.
pub fn mc_covariance(ens: &PathEnsemble) -> Result<Vec<MomentEstimate>> {
    if !ens.has_full_state() {
        return Err(Error::Config("ensemble stores no full states".into()));
    }
    let n = ens.n;
    Ok((0..ens.dates())
        .map(|d| {
            moment(ens.paths, n, n, ens.times[d], |p, out| {
                let x = ens.x(p, d);
                for j in 0..n {
                    for i in 0..n {
                        out[(i, j)] = x[i] * x[j];
                    }
                }
            })
        })
        .collect())
}

/// Empirical `E[x(t) x-hat(t)^T]` for reduced system `k`.
pub fn mc_cross_covariance(ens: &PathEnsemble, k: usize) -> Result<Vec<MomentEstimate>> {
    if !ens.has_full_state() || ens.reduced.get(k).is_none_or(|r| r.xhat.is_empty()) {
        return Err(Error::Config("ensemble stores no full and reduced states".into()));
    }
    let (n, nhat) = (ens.n, ens.reduced[k].nhat);
    Ok((0..ens.dates())
        .map(|d| {
            moment(ens.paths, n, nhat, ens.times[d], |p, out| {
                let x = ens.x(p, d);
                let xh = ens.xhat(k, p, d);
                for j in 0..nhat {
                    for i in 0..n {
                        out[(i, j)] = x[i] * xh[j];
                    }
                }
            })
        })
        .collect())
}

/// `L2` error between full and reduced outputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct L2Estimate {
    /// `sqrt(E int ||y - y-hat||^2 dt)`
    pub err: f64,
    /// `sqrt(E int ||y||^2 dt)`
    pub norm_y: f64,
    /// Monte Carlo mean of `int ||y - y-hat||^2 dt`.
    pub err_sq_mean: f64,
    /// Standard error of `err_sq_mean`.
    pub err_sq_stderr: f64,
}

impl L2Estimate {
    pub fn relative(&self) -> f64 {
        if self.norm_y == 0.0 {
            0.0
        } else {
            self.err / self.norm_y
        }
    }
}

/// Mean and standard error of a sample, summed in chunk order.
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let m = values.len();
    if m == 0 {
        return (f64::NAN, f64::NAN);
    }
    let (s, s2) = par::reduce_chunks(
        m,
        (0.0, 0.0),
        |r| values[r].iter().fold((0.0, 0.0), |(a, b), &v| (a + v, b + v * v)),
        |(a, b), (c, d)| (a + c, b + d),
    );
    let mf = m as f64;
    let mean = s / mf;
    if m == 1 {
        return (mean, 0.0);
    }
    let var = ((s2 - mf * mean * mean) / (mf - 1.0)).max(0.0);
    (mean, (var / mf).sqrt())
}

/// `L2` error of reduced system `k`; needs an ensemble simulated with
/// `track_l2`.
pub fn l2_error_estimate(ens: &PathEnsemble, k: usize) -> Result<L2Estimate> {
    let r = ens
        .reduced
        .get(k)
        .ok_or_else(|| Error::Config(format!("ensemble has no reduced system {k}")))?;
    if r.err_sq.is_empty() || ens.norm_sq.is_empty() {
        return Err(Error::Config("ensemble was simulated without L2 tracking".into()));
    }
    let (e, se) = mean_stderr(&r.err_sq);
    let (nm, _) = mean_stderr(&ens.norm_sq);
    Ok(L2Estimate {
        err: e.sqrt(),
        norm_y: nm.sqrt(),
        err_sq_mean: e,
        err_sq_stderr: se,
    })
}

/// One CSV row `(path_id, t, component, value)` per stored full-state entry.
pub fn path_rows(ens: &PathEnsemble) -> impl Iterator<Item = (usize, f64, usize, f64)> + '_ {
    let (dates, n) = (ens.dates(), ens.n);
    ens.x_paths.iter().enumerate().map(move |(idx, &v)| {
        let comp = idx % n;
        let date = (idx / n) % dates;
        let path = idx / (n * dates);
        (path, ens.times[date], comp, v)
    })
}
