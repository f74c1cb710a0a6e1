use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::covariance::{self, DEFAULT_GRID, DEFAULT_MEMORY_BUDGET};
use crate::error::{Error, Result};
use crate::linalg::{self, devectorize, vectorize};
use crate::linsys::{
    mean_square_stability, petrov_galerkin_reduce_with, reduced_mean_square_stability,
    ReducedSystem, SystemCoefficients, DEFAULT_COND_THRESHOLD,
};

use super::diagnostics::{diagnose, DiagnosticsLevel};
use super::{Reduction, ReductionDiagnostics};

#[derive(Debug, Clone)]
pub enum InitialGuess {
    /// Block-Krylov starts `[X0, A X0, N_i X0, ...]` and `[C^T, A^T C^T, N_i^T C^T, ...]`.
    Krylov,
    /// Seeded Gaussian starts.
    Random { seed: u64 },
    /// Caller-supplied projection pair (orthonormalised before use).
    Given { v: DMatrix<f64>, w: DMatrix<f64> },
}

#[derive(Debug, Clone)]
pub struct FixedPointOptions {
    pub max_iter: usize,
    /// Threshold on `max(||Pi_V - Pi_V'||_2, ||Pi_W - Pi_W'||_2)`.
    pub tol: f64,
    pub grid: usize,
    pub init: InitialGuess,
    pub orth_tol: f64,
    pub cond_threshold: f64,
    /// Seed for the random fallback start and for re-initialisations.
    pub seed: u64,
    pub diagnostics: DiagnosticsLevel,
    /// Re-initialisations allowed after unstable iterates (infinite horizon).
    pub max_retries: usize,
    pub memory_budget: u64,
}

impl Default for FixedPointOptions {
    fn default() -> Self {
        FixedPointOptions {
            max_iter: 100,
            tol: 1e-6,
            grid: DEFAULT_GRID,
            init: InitialGuess::Krylov,
            orth_tol: 1e-10,
            cond_threshold: DEFAULT_COND_THRESHOLD,
            seed: 0,
            diagnostics: DiagnosticsLevel::Full,
            max_retries: 5,
            memory_budget: DEFAULT_MEMORY_BUDGET,
        }
    }
}

/// Greedy Gram-Schmidt over a breadth-first Krylov sequence started at the
/// columns of `start` with generators `gens`, stopping at `want` columns.
fn greedy_krylov(start: &DMatrix<f64>, gens: &[&DMatrix<f64>], want: usize, seed: u64) -> DMatrix<f64> {
    let n = start.nrows();
    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(want);
    let mut frontier: Vec<DVector<f64>> = start.column_iter().map(|c| c.clone_owned()).collect();
    let try_add = |v: &DVector<f64>, basis: &mut Vec<DVector<f64>>| -> bool {
        let norm0 = v.norm();
        if norm0 == 0.0 {
            return false;
        }
        let mut u = v.clone();
        for _ in 0..2 {
            for b in basis.iter() {
                let c = b.dot(&u);
                u.axpy(-c, b, 1.0);
            }
        }
        let norm = u.norm();
        if norm > 1e-8 * norm0 {
            basis.push(u / norm);
            true
        } else {
            false
        }
    };
    let mut depth = 0;
    while basis.len() < want && !frontier.is_empty() && depth <= n {
        let mut next = Vec::new();
        for v in &frontier {
            if basis.len() >= want {
                break;
            }
            if try_add(v, &mut basis) {
                next.push(basis.last().expect("just pushed").clone());
            }
        }
        let mut expanded = Vec::new();
        for v in &next {
            for g in gens {
                expanded.push(*g * v);
            }
        }
        frontier = expanded;
        depth += 1;
    }
    if basis.len() < want {
        debug!("Krylov start spans only {} directions; filling randomly", basis.len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut attempts = 0;
        while basis.len() < want && attempts < 100 * want {
            let v = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
            try_add(&v, &mut basis);
            attempts += 1;
        }
    }
    DMatrix::from_columns(&basis)
}

/// Orthonormal Krylov starting pair, truncated at `nhat` columns.
pub fn krylov_initial_guess(sys: &SystemCoefficients, nhat: usize, seed: u64) -> (DMatrix<f64>, DMatrix<f64>) {
    let mut gens: Vec<&DMatrix<f64>> = vec![&sys.a];
    gens.extend(sys.noise.iter());
    let v = greedy_krylov(&sys.x0, &gens, nhat, seed);
    let at = sys.a.transpose();
    let nt: Vec<DMatrix<f64>> = sys.noise.iter().map(|m| m.transpose()).collect();
    let mut gens_t: Vec<&DMatrix<f64>> = vec![&at];
    gens_t.extend(nt.iter());
    let w = greedy_krylov(&sys.c.transpose(), &gens_t, nhat, seed.wrapping_add(1));
    (v, w)
}

fn random_orthonormal(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Result<DMatrix<f64>> {
    let m = DMatrix::from_fn(n, k, |_, _| StandardNormal.sample(rng));
    linalg::orth_with_rank(&m, 1e-10, k)
}

fn initial_pair(sys: &SystemCoefficients, nhat: usize, opts: &FixedPointOptions) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    match &opts.init {
        InitialGuess::Krylov => Ok(krylov_initial_guess(sys, nhat, opts.seed)),
        InitialGuess::Random { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            Ok((
                random_orthonormal(sys.n(), nhat, &mut rng)?,
                random_orthonormal(sys.n(), nhat, &mut rng)?,
            ))
        }
        InitialGuess::Given { v, w } => {
            if v.shape() != (sys.n(), nhat) || w.shape() != (sys.n(), nhat) {
                return Err(Error::DimensionMismatch("initial projection pair".into()));
            }
            Ok((
                linalg::orth_with_rank(v, opts.orth_tol, nhat)?,
                linalg::orth_with_rank(w, opts.orth_tol, nhat)?,
            ))
        }
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Horizon {
    Finite,
    Infinite,
}

/// Mixed integrals (finite horizon) or mixed Sylvester solutions (infinite).
fn mixed_targets(
    sys: &SystemCoefficients,
    red: &ReducedSystem,
    horizon: Horizon,
    grid: usize,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let k_tilde = red.mixed_kron(sys)?;
    let k_tilde_t = k_tilde.transpose();
    let init_p = &sys.x0 * red.x0.transpose();
    let init_q = sys.c.transpose() * &red.c;
    match horizon {
        Horizon::Finite => {
            let (p, _) = covariance::integral_and_terminal(&k_tilde, &init_p, sys.horizon, grid)?;
            let (q, _) = covariance::integral_and_terminal(&k_tilde_t, &init_q, sys.horizon, grid)?;
            Ok((p, q))
        }
        Horizon::Infinite => {
            let p = k_tilde
                .solve(&(-vectorize(&init_p)))
                .ok_or(Error::SingularKronecker)?;
            let q = k_tilde_t
                .solve(&(-vectorize(&init_q)))
                .ok_or(Error::SingularKronecker)?;
            Ok((
                devectorize(&p, k_tilde.rows, k_tilde.cols),
                devectorize(&q, k_tilde.rows, k_tilde.cols),
            ))
        }
    }
}

enum LoopOutcome {
    Done(Reduction),
    Unstable,
}

fn iterate(
    sys: &SystemCoefficients,
    nhat: usize,
    opts: &FixedPointOptions,
    horizon: Horizon,
    mut v: DMatrix<f64>,
    mut w: DMatrix<f64>,
) -> Result<std::result::Result<LoopOutcome, Error>> {
    let check_stable = |red: &ReducedSystem| -> Result<bool> {
        if horizon == Horizon::Finite {
            return Ok(true);
        }
        Ok(reduced_mean_square_stability(red, &sys.k_m)?.stable)
    };
    let mut red = petrov_galerkin_reduce_with(sys, &v, &w, opts.cond_threshold)?;
    if !check_stable(&red)? {
        return Ok(Ok(LoopOutcome::Unstable));
    }
    let mut history = Vec::new();
    let mut best: Option<(f64, ReducedSystem)> = None;
    let mut converged = false;
    for _ in 0..opts.max_iter {
        let (p_t, q_t) = mixed_targets(sys, &red, horizon, opts.grid)?;
        let v_new = linalg::orth_with_rank(&p_t, opts.orth_tol, nhat)?;
        let w_new = linalg::orth_with_rank(&q_t, opts.orth_tol, nhat)?;
        let change = linalg::subspace_gap(&v, &v_new).max(linalg::subspace_gap(&w, &w_new));
        let red_new = petrov_galerkin_reduce_with(sys, &v_new, &w_new, opts.cond_threshold)?;
        history.push(change);
        debug!("fixed-point iteration {}: subspace change {change:.3e}", history.len());
        v = v_new;
        w = w_new;
        red = red_new;
        if !check_stable(&red)? {
            return Ok(Ok(LoopOutcome::Unstable));
        }
        if best.as_ref().map_or(true, |(c, _)| change < *c) {
            best = Some((change, red.clone()));
        }
        if change < opts.tol {
            converged = true;
            break;
        }
    }
    let iterations = history.len();
    let last_change = history.last().copied().unwrap_or(f64::INFINITY);
    let final_red = if converged {
        red
    } else {
        best.map(|b| b.1).unwrap_or(red)
    };
    let mut diag = ReductionDiagnostics {
        iterations,
        converged,
        subspace_change_history: history,
        ..ReductionDiagnostics::default()
    };
    diagnose(
        sys,
        &final_red,
        opts.diagnostics,
        opts.grid,
        horizon == Horizon::Infinite,
        opts.memory_budget,
        &mut diag,
    )?;
    let reduction = Reduction {
        red: final_red,
        diagnostics: diag,
    };
    if converged {
        Ok(Ok(LoopOutcome::Done(reduction)))
    } else {
        Ok(Err(Error::NotConverged {
            iterations,
            last_change,
            best: Box::new(reduction),
        }))
    }
}

fn check_order(sys: &SystemCoefficients, nhat: usize) -> Result<()> {
    if nhat == 0 || nhat > sys.n() {
        return Err(Error::Config(format!(
            "reduced order {nhat} must lie in 1..={}",
            sys.n()
        )));
    }
    Ok(())
}

/// Finite-horizon Sylvester fixed-point iteration with `S = I`: compute the
/// mixed Gramians `P-tilde(T)`, `Q-tilde(T)` of the current iterate, take
/// orthonormal bases of their images as the new `V`, `W`, project, repeat
/// until the subspaces settle.
pub fn sylvester_fixed_point(sys: &SystemCoefficients, nhat: usize, opts: &FixedPointOptions) -> Result<Reduction> {
    check_order(sys, nhat)?;
    let (v, w) = initial_pair(sys, nhat, opts)?;
    match iterate(sys, nhat, opts, Horizon::Finite, v, w)? {
        Ok(LoopOutcome::Done(r)) => Ok(r),
        Ok(LoopOutcome::Unstable) => unreachable!("finite horizon never checks stability"),
        Err(e) => Err(e),
    }
}

/// Infinite-horizon variant: the mixed Gramians are the solutions of
/// `K-tilde vec X = -vec(X0 X0-hat^T)` and `K-tilde^T vec Y = -vec(C^T C-hat)`.
/// Unstable reduced iterates trigger a seeded random restart.
pub fn stable_fixed_point(sys: &SystemCoefficients, nhat: usize, opts: &FixedPointOptions) -> Result<Reduction> {
    check_order(sys, nhat)?;
    let st = mean_square_stability(sys)?;
    if !st.stable {
        return Err(Error::UnstableSystem {
            abscissa: st.spectral_abscissa,
        });
    }
    let (mut v, mut w) = initial_pair(sys, nhat, opts)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed_0f_5ab1e);
    for retry in 0..=opts.max_retries {
        match iterate(sys, nhat, opts, Horizon::Infinite, v, w)? {
            Ok(LoopOutcome::Done(mut r)) => {
                r.diagnostics.retries = retry;
                return Ok(r);
            }
            Ok(LoopOutcome::Unstable) => {
                warn!("unstable reduced iterate; re-initialising ({}/{})", retry + 1, opts.max_retries);
                v = random_orthonormal(sys.n(), nhat, &mut rng)?;
                w = random_orthonormal(sys.n(), nhat, &mut rng)?;
            }
            Err(mut e) => {
                if let Error::NotConverged { best, .. } = &mut e {
                    best.diagnostics.retries = retry;
                }
                return Err(e);
            }
        }
    }
    Err(Error::UnstableIterate {
        retries: opts.max_retries,
    })
}
