//! Covariance ODEs `d/dt vec F = K vec F` for the primal, reduced and mixed
//! systems and their duals, time-averaged Gramians and the convolution
//! integrals used by the optimality diagnostics.

use std::sync::Arc;

use log::warn;
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{self, devectorize, vectorize};
use crate::linsys::{KronMatrix, ReducedSystem, SystemCoefficients};

/// Default number of grid intervals.
pub const DEFAULT_GRID: usize = 200;
/// Largest grid the automatic refinement will reach.
pub const MAX_GRID: usize = 3200;
/// Relative change under which a refinement is considered converged.
pub const REFINE_TOL: f64 = 1e-8;
/// Vectorised dimension up to which the exponential is formed explicitly.
pub const DENSE_EXP_MAX_DIM: usize = 1024;
/// Default memory budget for full `n^2`-sized solves (8 GiB).
pub const DEFAULT_MEMORY_BUDGET: u64 = 8 << 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CovKind {
    /// `F`, initial value `X0 X0^T`.
    Primal,
    /// `F-hat`, initial value `X0-hat X0-hat^T`.
    Reduced,
    /// `F-tilde`, initial value `X0 X0-hat^T`.
    Mixed,
    /// `G`, initial value `C^T C`.
    Dual,
    /// `G-hat`, initial value `C-hat^T C-hat`.
    DualReduced,
    /// `G-tilde`, initial value `C^T C-hat`.
    DualMixed,
}

impl CovKind {
    /// Kinds whose values are symmetric PSD at every time.
    pub fn is_symmetric(self) -> bool {
        !matches!(self, CovKind::Mixed | CovKind::DualMixed)
    }

    pub fn name(self) -> &'static str {
        match self {
            CovKind::Primal => "F",
            CovKind::Reduced => "Fhat",
            CovKind::Mixed => "Ftilde",
            CovKind::Dual => "G",
            CovKind::DualReduced => "Ghat",
            CovKind::DualMixed => "Gtilde",
        }
    }
}

#[derive(Debug)]
struct Source {
    kron: Arc<KronMatrix>,
    init: DMatrix<f64>,
    horizon: f64,
}

/// Matrix-valued trajectory on a uniform grid `t_k = k T / l`.
#[derive(Debug, Clone)]
pub struct CovarianceTrajectory {
    pub times: Vec<f64>,
    pub values: Vec<DMatrix<f64>>,
    pub kind: CovKind,
    /// `true` for the running integral `t -> int_0^t X(s) ds`.
    pub integrated: bool,
    /// `true` when every value is stored transposed.
    pub transposed: bool,
    source: Option<Arc<Source>>,
}

impl CovarianceTrajectory {
    pub fn grid(&self) -> usize {
        self.times.len() - 1
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().expect("non-empty grid")
    }

    pub fn terminal(&self) -> &DMatrix<f64> {
        self.values.last().expect("non-empty grid")
    }

    pub fn initial(&self) -> &DMatrix<f64> {
        &self.values[0]
    }

    /// Build a trajectory from explicit values (no refinement possible).
    pub fn from_values(times: Vec<f64>, values: Vec<DMatrix<f64>>, kind: CovKind) -> Result<Self> {
        if times.len() < 2 || times.len() != values.len() {
            return Err(Error::DimensionMismatch(
                "trajectory needs matching times and values, at least two points".into(),
            ));
        }
        Ok(CovarianceTrajectory {
            times,
            values,
            kind,
            integrated: false,
            transposed: false,
            source: None,
        })
    }

    /// Re-solve on a finer grid; `None` for trajectories without a generator.
    pub fn refined(&self, grid: usize) -> Option<Result<Self>> {
        let src = self.source.as_ref()?;
        let base = solve_covariance_shared(src.kron.clone(), &src.init, src.horizon, grid, self.kind);
        let out = match base {
            Ok(t) if self.integrated => running_integral(&t),
            other => other,
        };
        Some(out.map(|t| if self.transposed { t.transpose() } else { t }))
    }

    /// The trajectory `t -> X(t)^T`.
    pub fn transpose(&self) -> Self {
        CovarianceTrajectory {
            times: self.times.clone(),
            values: self.values.iter().map(|v| v.transpose()).collect(),
            kind: self.kind,
            integrated: self.integrated,
            transposed: !self.transposed,
            source: self.source.clone(),
        }
    }

    /// Largest relative asymmetry over the grid.
    pub fn max_asymmetry(&self) -> f64 {
        self.values.iter().map(linalg::asymmetry).fold(0.0, f64::max)
    }

    /// Smallest `lambda_min / lambda_max` over the grid (symmetric kinds).
    pub fn min_relative_eigenvalue(&self) -> f64 {
        self.values
            .iter()
            .map(|v| {
                let (min, max) = linalg::sym_eig_extremes(v);
                if max > 0.0 {
                    min / max
                } else if min == 0.0 {
                    0.0
                } else {
                    min
                }
            })
            .fold(f64::INFINITY, f64::min)
    }
}

/// One step of `v -> exp(h K) v`.
enum Propagator {
    Diagonal(DVector<f64>),
    Dense(DMatrix<f64>),
    Action { h: f64, norm1: f64 },
}

impl Propagator {
    fn new(kron: &KronMatrix, h: f64) -> Result<Self> {
        if kron.diagonal {
            let d = kron.matrix.diagonal().map(|x| (x * h).exp());
            if d.iter().any(|x| !x.is_finite()) {
                return Err(Error::NumericalFailure("exponential overflow".into()));
            }
            Ok(Propagator::Diagonal(d))
        } else if kron.dim() <= DENSE_EXP_MAX_DIM {
            Ok(Propagator::Dense(linalg::expm(&(&kron.matrix * h))?))
        } else {
            Ok(Propagator::Action {
                h,
                norm1: linalg::norm1(&kron.matrix),
            })
        }
    }

    fn apply(&self, kron: &KronMatrix, v: &DVector<f64>) -> Result<DVector<f64>> {
        let out = match self {
            Propagator::Diagonal(d) => v.component_mul(d),
            Propagator::Dense(e) => e * v,
            Propagator::Action { h, norm1 } => linalg::expm_action(&kron.matrix, *norm1, *h, v)?,
        };
        if out.iter().all(|x| x.is_finite()) {
            Ok(out)
        } else {
            Err(Error::NumericalFailure(
                "covariance trajectory overflowed".into(),
            ))
        }
    }
}

/// `exp(t K) v` without storing intermediate values.
pub fn propagate(kron: &KronMatrix, v: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
    Propagator::new(kron, t)?.apply(kron, v)
}

fn check_init(kron: &KronMatrix, init: &DMatrix<f64>) -> Result<()> {
    if init.shape() != (kron.rows, kron.cols) {
        return Err(Error::DimensionMismatch(format!(
            "initial value is {}x{}, operator acts on {}x{}",
            init.nrows(),
            init.ncols(),
            kron.rows,
            kron.cols
        )));
    }
    Ok(())
}

/// Solve `d/dt vec X = K vec X`, `X(0) = init` on `grid` uniform intervals.
pub fn solve_covariance(
    kron: &KronMatrix,
    init: &DMatrix<f64>,
    horizon: f64,
    grid: usize,
    kind: CovKind,
) -> Result<CovarianceTrajectory> {
    solve_covariance_shared(Arc::new(kron.clone()), init, horizon, grid, kind)
}

fn solve_covariance_shared(
    kron: Arc<KronMatrix>,
    init: &DMatrix<f64>,
    horizon: f64,
    grid: usize,
    kind: CovKind,
) -> Result<CovarianceTrajectory> {
    check_init(&kron, init)?;
    if grid == 0 {
        return Err(Error::Config("grid must have at least one interval".into()));
    }
    let h = horizon / grid as f64;
    let step = Propagator::new(&kron, h)?;
    let mut times = Vec::with_capacity(grid + 1);
    let mut values = Vec::with_capacity(grid + 1);
    let mut v = vectorize(init);
    times.push(0.0);
    values.push(init.clone());
    let v0 = v.clone();
    for k in 1..=grid {
        v = match &step {
            // diagonal generators are evaluated pointwise to avoid accumulating round-off
            Propagator::Diagonal(_) => propagate(&kron, &v0, k as f64 * h)?,
            _ => step.apply(&kron, &v)?,
        };
        times.push(if k == grid { horizon } else { k as f64 * h });
        values.push(devectorize(&v, kron.rows, kron.cols));
    }
    Ok(CovarianceTrajectory {
        times,
        values,
        kind,
        integrated: false,
        transposed: false,
        source: Some(Arc::new(Source {
            kron,
            init: init.clone(),
            horizon,
        })),
    })
}

/// Composite Simpson rule on an even number of uniform intervals (the last
/// interval uses a cubic correction when the count is odd).
pub fn simpson(values: &[DMatrix<f64>], h: f64) -> DMatrix<f64> {
    let l = values.len() - 1;
    assert!(l >= 1, "simpson needs at least two points");
    if l == 1 {
        return (&values[0] + &values[1]) * (h / 2.0);
    }
    let even = l - l % 2;
    let mut acc = &values[0] + &values[even];
    for (k, v) in values.iter().enumerate().take(even).skip(1) {
        acc += v * if k % 2 == 1 { 4.0 } else { 2.0 };
    }
    let mut out = acc * (h / 3.0);
    if l % 2 == 1 {
        // 3/8 rule over the last three intervals replaces the last Simpson panel
        let i = l - 3;
        let tail38 = (&values[i] + &values[i + 1] * 3.0 + &values[i + 2] * 3.0 + &values[i + 3]) * (3.0 * h / 8.0);
        let last_panel = (&values[i] + &values[i + 1] * 4.0 + &values[i + 2]) * (h / 3.0);
        out = out - last_panel + tail38;
    }
    out
}

/// Gramian-type integral `int_0^T X(t) dt` with its quadrature cross-check.
#[derive(Debug, Clone)]
pub struct Integral {
    pub value: DMatrix<f64>,
    /// Composite-Simpson estimate on the trajectory grid.
    pub quadrature: DMatrix<f64>,
    /// `||value - quadrature|| / ||value||`.
    pub rel_diff: f64,
    /// Whether the closed form `K^{-1}(X(T) - X(0))` was used.
    pub closed_form: bool,
}

fn rel_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let scale = a.norm().max(b.norm());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).norm() / scale
    }
}

/// `int_0^T X(t) dt = devec(K^{-1}(vec X(T) - vec X(0)))`, cross-checked by
/// Simpson quadrature of `traj`. A singular `K` falls back to quadrature
/// with grid doubling.
pub fn integrate_trajectory(
    kron: &KronMatrix,
    init: &DMatrix<f64>,
    traj: &CovarianceTrajectory,
) -> Result<Integral> {
    check_init(kron, init)?;
    let h = traj.horizon() / traj.grid() as f64;
    let quadrature = simpson(&traj.values, h);
    let rhs = vectorize(traj.terminal()) - vectorize(init);
    match kron.solve(&rhs) {
        Some(sol) => {
            let value = devectorize(&sol, kron.rows, kron.cols);
            let rel = rel_diff(&value, &quadrature);
            Ok(Integral {
                value,
                quadrature,
                rel_diff: rel,
                closed_form: true,
            })
        }
        None => {
            warn!("Kronecker matrix is singular; integrating by quadrature");
            quadrature_with_refinement(kron, init, traj)
        }
    }
}

fn quadrature_with_refinement(
    kron: &KronMatrix,
    init: &DMatrix<f64>,
    traj: &CovarianceTrajectory,
) -> Result<Integral> {
    let mut current = traj.clone();
    let mut value = simpson(&current.values, current.horizon() / current.grid() as f64);
    let mut change = f64::INFINITY;
    while current.grid() * 2 <= MAX_GRID {
        let finer = solve_covariance(kron, init, traj.horizon(), current.grid() * 2, traj.kind)?;
        let v2 = simpson(&finer.values, finer.horizon() / finer.grid() as f64);
        change = rel_diff(&v2, &value);
        value = v2;
        current = finer;
        if change < REFINE_TOL {
            break;
        }
    }
    if change >= REFINE_TOL {
        warn!("quadrature refinement stopped at the grid cap (relative change {change:.2e})");
    }
    Ok(Integral {
        quadrature: value.clone(),
        value,
        rel_diff: if change.is_finite() { change } else { 0.0 },
        closed_form: false,
    })
}

/// Closed-form `int_0^T exp(tK) vec(init) dt` without a stored trajectory;
/// also returns the terminal value. Falls back to quadrature if `K` is
/// singular.
pub fn integral_and_terminal(
    kron: &KronMatrix,
    init: &DMatrix<f64>,
    horizon: f64,
    grid: usize,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    check_init(kron, init)?;
    let v0 = vectorize(init);
    let vt = propagate(kron, &v0, horizon)?;
    match kron.solve(&(&vt - &v0)) {
        Some(sol) => Ok((
            devectorize(&sol, kron.rows, kron.cols),
            devectorize(&vt, kron.rows, kron.cols),
        )),
        None => {
            warn!("Kronecker matrix is singular; integrating by quadrature");
            let traj = solve_covariance(kron, init, horizon, grid, CovKind::Primal)?;
            let int = quadrature_with_refinement(kron, init, &traj)?;
            Ok((int.value, traj.terminal().clone()))
        }
    }
}

/// Running integral `t_k -> int_0^{t_k} X(s) ds` at every grid point,
/// in closed form when the generator is invertible.
pub fn running_integral(traj: &CovarianceTrajectory) -> Result<CovarianceTrajectory> {
    let closed = traj.source.as_ref().and_then(|src| {
        let lu = if src.kron.diagonal { None } else { src.kron.lu() };
        if !src.kron.diagonal && lu.is_none() {
            return None;
        }
        let v0 = vectorize(&src.init);
        let inv_diag = if src.kron.diagonal {
            let d = src.kron.matrix.diagonal();
            let max = d.amax();
            if max == 0.0 || d.iter().any(|x| x.abs() < 1e-14 * max) {
                return None;
            }
            Some(d.map(|x| 1.0 / x))
        } else {
            None
        };
        let values = traj
            .values
            .iter()
            .map(|x| {
                let rhs = vectorize(x) - &v0;
                let sol = match (&inv_diag, &lu) {
                    (Some(d), _) => rhs.component_mul(d),
                    (None, Some(lu)) => lu.solve(&rhs),
                    _ => unreachable!(),
                };
                devectorize(&sol, src.kron.rows, src.kron.cols)
            })
            .collect::<Vec<_>>();
        Some(values)
    });
    let values = match closed {
        Some(v) => v,
        None => cumulative_quadrature(&traj.values, traj.horizon() / traj.grid() as f64),
    };
    Ok(CovarianceTrajectory {
        times: traj.times.clone(),
        values,
        kind: traj.kind,
        integrated: true,
        transposed: false,
        source: traj.source.clone(),
    })
}

fn cumulative_quadrature(values: &[DMatrix<f64>], h: f64) -> Vec<DMatrix<f64>> {
    let l = values.len() - 1;
    let mut out = Vec::with_capacity(l + 1);
    out.push(DMatrix::zeros(values[0].nrows(), values[0].ncols()));
    let mut even_acc = out[0].clone();
    for k in 1..=l {
        if k % 2 == 0 {
            even_acc += (&values[k - 2] + &values[k - 1] * 4.0 + &values[k]) * (h / 3.0);
            out.push(even_acc.clone());
        } else if k < l {
            // quadratic through k-1, k, k+1 integrated over [t_{k-1}, t_k]
            let part = (&values[k - 1] * 5.0 + &values[k] * 8.0 - &values[k + 1]) * (h / 12.0);
            out.push(&even_acc + part);
        } else {
            let part = (&values[k] * 5.0 + &values[k - 1] * 8.0 - &values[k - 2]) * (h / 12.0);
            out.push(&even_acc + part);
        }
    }
    out
}

/// Convolution `int_0^T left(T - t) W right(t) dt` with refinement details.
#[derive(Debug, Clone)]
pub struct Convolution {
    pub value: DMatrix<f64>,
    /// Relative change against the half-resolution estimate.
    pub rel_change: f64,
    pub grid: usize,
}

fn same_grid(a: &CovarianceTrajectory, b: &CovarianceTrajectory) -> bool {
    a.times.len() == b.times.len()
        && a.times
            .iter()
            .zip(&b.times)
            .all(|(x, y)| (x - y).abs() <= 1e-14 * x.abs().max(1.0))
}

fn convolve_on_grid(
    left: &CovarianceTrajectory,
    right: &CovarianceTrajectory,
    weights: &[&DMatrix<f64>],
    stride: usize,
) -> Vec<DMatrix<f64>> {
    let l = left.grid();
    let h = left.horizon() / l as f64 * stride as f64;
    weights
        .iter()
        .map(|w| {
            let integrand: Vec<DMatrix<f64>> = (0..=l)
                .step_by(stride)
                .map(|k| &left.values[l - k] * *w * &right.values[k])
                .collect();
            simpson(&integrand, h)
        })
        .collect()
}

/// `int_0^T left(T - t) W_i right(t) dt` for several weights at once.
/// Doubles the grid (re-solving both trajectories) until halving the
/// resolution changes every integral by less than `1e-8` relative.
pub fn convolution_integrals(
    left: &CovarianceTrajectory,
    right: &CovarianceTrajectory,
    weights: &[&DMatrix<f64>],
) -> Result<Vec<Convolution>> {
    if !same_grid(left, right) {
        return Err(Error::GridMismatch);
    }
    let inner_l = left.values[0].ncols();
    for w in weights {
        if w.nrows() != inner_l || w.ncols() != right.values[0].nrows() {
            return Err(Error::DimensionMismatch("convolution weight".into()));
        }
    }
    let mut left = left.clone();
    let mut right = right.clone();
    loop {
        let l = left.grid();
        let full = convolve_on_grid(&left, &right, weights, 1);
        let change = if l % 4 == 0 {
            let half = convolve_on_grid(&left, &right, weights, 2);
            full.iter()
                .zip(&half)
                .map(|(a, b)| rel_diff(a, b))
                .fold(0.0, f64::max)
        } else {
            f64::INFINITY
        };
        let can_refine = l * 2 <= MAX_GRID;
        if change < REFINE_TOL || !can_refine {
            if change >= REFINE_TOL {
                warn!("convolution refinement stopped at grid {l} (relative change {change:.2e})");
            }
            return Ok(full
                .into_iter()
                .map(|value| Convolution {
                    value,
                    rel_change: change,
                    grid: l,
                })
                .collect());
        }
        match (left.refined(l * 2), right.refined(l * 2)) {
            (Some(a), Some(b)) => {
                left = a?;
                right = b?;
            }
            _ => {
                return Ok(full
                    .into_iter()
                    .map(|value| Convolution {
                        value,
                        rel_change: change,
                        grid: l,
                    })
                    .collect())
            }
        }
    }
}

/// `int_0^T left(T - t) W right(t) dt`; `weight = None` means `W = I`.
pub fn convolution_integral(
    left: &CovarianceTrajectory,
    right: &CovarianceTrajectory,
    weight: Option<&DMatrix<f64>>,
) -> Result<DMatrix<f64>> {
    let eye;
    let w = match weight {
        Some(w) => w,
        None => {
            eye = DMatrix::identity(left.values[0].ncols(), left.values[0].ncols());
            &eye
        }
    };
    Ok(convolution_integrals(left, right, &[w])?
        .pop()
        .expect("one weight")
        .value)
}

/// Terminal covariances and time-averaged Gramians of a full/reduced pair.
/// Full-order quantities are absent when their `n^2`-sized solves were
/// skipped; terminal covariances are absent for infinite horizons.
#[derive(Debug, Clone)]
pub struct GramianSet {
    pub p: Option<DMatrix<f64>>,
    pub q: Option<DMatrix<f64>>,
    pub p_hat: DMatrix<f64>,
    pub q_hat: DMatrix<f64>,
    pub p_tilde: DMatrix<f64>,
    pub q_tilde: DMatrix<f64>,
    pub f: Option<DMatrix<f64>>,
    pub g: Option<DMatrix<f64>>,
    pub f_hat: Option<DMatrix<f64>>,
    pub g_hat: Option<DMatrix<f64>>,
    pub f_tilde: Option<DMatrix<f64>>,
    pub g_tilde: Option<DMatrix<f64>>,
    pub horizon: f64,
    /// Largest closed-form versus quadrature discrepancy over the solves.
    pub quadrature_rel_diff: f64,
}

/// The trajectories behind a [`GramianSet`].
#[derive(Debug, Clone)]
pub struct TrajectorySet {
    pub f: Option<CovarianceTrajectory>,
    pub g: Option<CovarianceTrajectory>,
    pub f_hat: CovarianceTrajectory,
    pub f_tilde: CovarianceTrajectory,
    pub g_hat: CovarianceTrajectory,
    pub g_tilde: CovarianceTrajectory,
}

#[derive(Debug, Clone)]
pub struct GramianOptions {
    pub grid: usize,
    /// Solve the full-order primal and dual systems.
    pub full: bool,
    pub memory_budget: u64,
}

impl Default for GramianOptions {
    fn default() -> Self {
        GramianOptions {
            grid: DEFAULT_GRID,
            full: true,
            memory_budget: DEFAULT_MEMORY_BUDGET,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CovarianceSolution {
    pub gramians: GramianSet,
    pub trajectories: TrajectorySet,
}

/// Rough peak memory of a dense solve with vectorised dimension `d`.
pub fn dense_solve_bytes(d: usize) -> u64 {
    // operator, exponential or LU copy, and workspace
    4 * (d as u64) * (d as u64) * 8
}

fn solve_pair(
    kron: KronMatrix,
    init_primal: &DMatrix<f64>,
    init_dual: &DMatrix<f64>,
    horizon: f64,
    grid: usize,
    kinds: (CovKind, CovKind),
) -> Result<(CovarianceTrajectory, Integral, CovarianceTrajectory, Integral)> {
    let dual_kron = kron.transpose();
    let primal = solve_covariance(&kron, init_primal, horizon, grid, kinds.0)?;
    let p_int = integrate_trajectory(&kron, init_primal, &primal)?;
    let dual = solve_covariance(&dual_kron, init_dual, horizon, grid, kinds.1)?;
    let q_int = integrate_trajectory(&dual_kron, init_dual, &dual)?;
    Ok((primal, p_int, dual, q_int))
}

/// Solve all six covariance ODEs on a shared grid and integrate them.
pub fn solve_all(
    sys: &SystemCoefficients,
    red: &ReducedSystem,
    opts: &GramianOptions,
) -> Result<CovarianceSolution> {
    let n = sys.n();
    let nhat = red.nhat();
    if red.v.nrows() != n || red.noise.len() != sys.q() || red.c.nrows() != sys.p() || red.x0.ncols() != sys.m() {
        return Err(Error::DimensionMismatch("reduced system does not match the full system".into()));
    }
    let mixed_bytes = dense_solve_bytes(n * nhat);
    if mixed_bytes > opts.memory_budget {
        return Err(Error::MemoryBudgetExceeded {
            needed: mixed_bytes,
            budget: opts.memory_budget,
        });
    }
    if opts.full {
        let full_bytes = dense_solve_bytes(n * n);
        if full_bytes > opts.memory_budget {
            return Err(Error::MemoryBudgetExceeded {
                needed: full_bytes,
                budget: opts.memory_budget,
            });
        }
    }
    let t = sys.horizon;
    let mut worst: f64 = 0.0;

    let (f_hat, p_hat, g_hat, q_hat) = solve_pair(
        red.kron(&sys.k_m)?,
        &(&red.x0 * red.x0.transpose()),
        &(red.c.transpose() * &red.c),
        t,
        opts.grid,
        (CovKind::Reduced, CovKind::DualReduced),
    )?;
    let (f_tilde, p_tilde, g_tilde, q_tilde) = solve_pair(
        red.mixed_kron(sys)?,
        &(&sys.x0 * red.x0.transpose()),
        &(sys.c.transpose() * &red.c),
        t,
        opts.grid,
        (CovKind::Mixed, CovKind::DualMixed),
    )?;
    for i in [&p_hat, &q_hat, &p_tilde, &q_tilde] {
        worst = worst.max(i.rel_diff);
    }
    let (f, p, g, q) = if opts.full {
        let (f, p, g, q) = solve_pair(
            sys.kron(),
            &(&sys.x0 * sys.x0.transpose()),
            &(sys.c.transpose() * &sys.c),
            t,
            opts.grid,
            (CovKind::Primal, CovKind::Dual),
        )?;
        worst = worst.max(p.rel_diff).max(q.rel_diff);
        (Some(f), Some(p.value), Some(g), Some(q.value))
    } else {
        (None, None, None, None)
    };

    let gramians = GramianSet {
        p,
        q,
        p_hat: p_hat.value,
        q_hat: q_hat.value,
        p_tilde: p_tilde.value,
        q_tilde: q_tilde.value,
        f: f.as_ref().map(|x| x.terminal().clone()),
        g: g.as_ref().map(|x| x.terminal().clone()),
        f_hat: Some(f_hat.terminal().clone()),
        g_hat: Some(g_hat.terminal().clone()),
        f_tilde: Some(f_tilde.terminal().clone()),
        g_tilde: Some(g_tilde.terminal().clone()),
        horizon: t,
        quadrature_rel_diff: worst,
    };
    Ok(CovarianceSolution {
        gramians,
        trajectories: TrajectorySet {
            f,
            g,
            f_hat,
            f_tilde,
            g_hat,
            g_tilde,
        },
    })
}

/// All Gramians including the full-order ones.
pub fn solve_all_gramians(sys: &SystemCoefficients, red: &ReducedSystem, grid: usize) -> Result<GramianSet> {
    let opts = GramianOptions {
        grid,
        ..GramianOptions::default()
    };
    Ok(solve_all(sys, red, &opts)?.gramians)
}

/// Full-order Gramians `P(T)`, `Q(T)` only.
pub fn full_gramians(sys: &SystemCoefficients, grid: usize) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let kron = sys.kron();
    let (p, _) = integral_and_terminal(&kron, &(&sys.x0 * sys.x0.transpose()), sys.horizon, grid)?;
    let (q, _) = integral_and_terminal(&kron.transpose(), &(sys.c.transpose() * &sys.c), sys.horizon, grid)?;
    Ok((linalg::symmetrize(&p), linalg::symmetrize(&q)))
}

/// CSV rows `(t, row, col, value)` of a trajectory.
pub fn trajectory_rows(traj: &CovarianceTrajectory) -> Vec<(f64, usize, usize, f64)> {
    let mut out = Vec::new();
    for (t, v) in traj.times.iter().zip(&traj.values) {
        for j in 0..v.ncols() {
            for i in 0..v.nrows() {
                out.push((*t, i, j, v[(i, j)]));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn scalar_kron(c: f64) -> KronMatrix {
        let sys = SystemCoefficients::new(
            DMatrix::from_element(1, 1, -0.05),
            vec![DMatrix::from_element(1, 1, (c + 0.1f64).max(0.0).sqrt())],
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            1.0,
        )
        .unwrap();
        sys.kron()
    }

    #[test]
    fn scalar_terminal_and_integral() {
        let k = scalar_kron(-0.06);
        assert_relative_eq!(k.matrix[(0, 0)], -0.06, epsilon = 1e-15);
        let init = DMatrix::from_element(1, 1, 1.0);
        let traj = solve_covariance(&k, &init, 1.0, 200, CovKind::Primal).unwrap();
        assert_relative_eq!(traj.terminal()[(0, 0)], (-0.06f64).exp(), epsilon = 1e-14);
        let int = integrate_trajectory(&k, &init, &traj).unwrap();
        assert_relative_eq!(int.value[(0, 0)], ((-0.06f64).exp() - 1.0) / -0.06, epsilon = 1e-14);
        assert!(int.rel_diff < 1e-12);
    }

    #[test]
    fn zero_init_stays_zero() {
        let k = scalar_kron(-0.06);
        let init = DMatrix::zeros(1, 1);
        let traj = solve_covariance(&k, &init, 1.0, 20, CovKind::Primal).unwrap();
        assert!(traj.values.iter().all(|v| v[(0, 0)] == 0.0));
        assert_eq!(integrate_trajectory(&k, &init, &traj).unwrap().value[(0, 0)], 0.0);
    }

    #[test]
    fn singular_operator_falls_back_to_quadrature() {
        let sys = SystemCoefficients::new(
            DMatrix::zeros(1, 1),
            vec![DMatrix::zeros(1, 1)],
            DMatrix::from_element(1, 1, 2.0),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            3.0,
        )
        .unwrap();
        let k = sys.kron();
        let init = DMatrix::from_element(1, 1, 4.0);
        let traj = solve_covariance(&k, &init, 3.0, 10, CovKind::Primal).unwrap();
        let int = integrate_trajectory(&k, &init, &traj).unwrap();
        assert!(!int.closed_form);
        assert_relative_eq!(int.value[(0, 0)], 12.0, epsilon = 1e-12);
    }

    #[test]
    fn simpson_is_exact_for_cubics_on_odd_grids() {
        for l in [2usize, 3, 5, 8] {
            let h = 1.0 / l as f64;
            let vals: Vec<_> = (0..=l)
                .map(|k| {
                    let t = k as f64 * h;
                    DMatrix::from_element(1, 1, t * t * t - t)
                })
                .collect();
            assert_relative_eq!(simpson(&vals, h)[(0, 0)], 0.25 - 0.5, epsilon = 1e-14);
        }
    }

    #[test]
    fn cumulative_quadrature_of_quadratic() {
        let l = 6;
        let h = 0.5;
        let vals: Vec<_> = (0..=l)
            .map(|k| DMatrix::from_element(1, 1, (k as f64 * h).powi(2)))
            .collect();
        let cum = cumulative_quadrature(&vals, h);
        for (k, c) in cum.iter().enumerate() {
            let t = k as f64 * h;
            assert_relative_eq!(c[(0, 0)], t * t * t / 3.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn scalar_convolution_closed_form() {
        let k = scalar_kron(-0.06);
        let init = DMatrix::from_element(1, 1, 1.0);
        let traj = solve_covariance(&k, &init, 1.0, 200, CovKind::Primal).unwrap();
        let conv = convolution_integral(&traj, &traj, None).unwrap();
        assert_relative_eq!(conv[(0, 0)], (-0.06f64).exp(), epsilon = 1e-12);
        let weighted = convolution_integral(&traj, &traj, Some(&DMatrix::from_element(1, 1, 1.0))).unwrap();
        assert_eq!(conv, weighted);
    }

    #[test]
    fn mismatched_grids_are_rejected() {
        let k = scalar_kron(-0.06);
        let init = DMatrix::from_element(1, 1, 1.0);
        let a = solve_covariance(&k, &init, 1.0, 200, CovKind::Primal).unwrap();
        let b = solve_covariance(&k, &init, 1.0, 100, CovKind::Primal).unwrap();
        assert!(matches!(
            convolution_integral(&a, &b, None),
            Err(Error::GridMismatch)
        ));
    }

    #[test]
    fn running_integral_matches_closed_form() {
        let k = scalar_kron(-0.06);
        let init = DMatrix::from_element(1, 1, 1.0);
        let traj = solve_covariance(&k, &init, 1.0, 10, CovKind::Primal).unwrap();
        let run = running_integral(&traj).unwrap();
        for (t, v) in run.times.iter().zip(&run.values) {
            assert_relative_eq!(v[(0, 0)], ((-0.06 * t).exp() - 1.0) / -0.06, epsilon = 1e-14);
        }
    }
}
