//! Bermudan call pricing on reduced states with Longstaff-Schwartz least
//! squares Monte Carlo, and the pathwise bound on the price gap between the
//! full and the reduced model.

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linsys::{ReducedSystem, SystemCoefficients};
use crate::par;
use crate::simulate::{self, mean_stderr, NoiseSpec, OutputStatistic, PathEnsemble, SimulationOptions};

/// Paths required per basis function.
pub const PATHS_PER_BASIS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayoffKind {
    /// Call on the scalar output `y = C x`.
    BasketCall,
    /// Call on the largest component of `y`.
    MaxCall,
}

impl PayoffKind {
    pub fn statistic(self) -> OutputStatistic {
        match self {
            PayoffKind::BasketCall => OutputStatistic::Scalar,
            PayoffKind::MaxCall => OutputStatistic::Max,
        }
    }
}

/// Exercise dates, discount rate and strike.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExerciseSpec {
    pub dates: Vec<f64>,
    pub rate: f64,
    pub strike: f64,
    pub payoff_kind: PayoffKind,
}

impl ExerciseSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dates.is_empty() {
            return Err(Error::Config("at least one exercise date is required".into()));
        }
        if self.dates.windows(2).any(|w| w[1] <= w[0]) || self.dates[0] < 0.0 {
            return Err(Error::Config("exercise dates must be nonnegative and strictly increasing".into()));
        }
        if *self.dates.last().expect("nonempty") <= 0.0 {
            return Err(Error::Config("the last exercise date must be positive".into()));
        }
        if !(self.strike > 0.0) || !self.rate.is_finite() {
            return Err(Error::Config("strike must be positive and rate finite".into()));
        }
        Ok(())
    }

    pub fn horizon(&self) -> f64 {
        *self.dates.last().expect("validated")
    }

    /// `e^{-r t} max(y - kappa, 0)`
    pub fn payoff(&self, y: f64, t: f64) -> f64 {
        payoff(y, t, self.rate, self.strike)
    }
}

/// Discounted call payoff `e^{-r t} max(y - kappa, 0)`.
pub fn payoff(y: f64, t: f64, rate: f64, strike: f64) -> f64 {
    let intrinsic = (y - strike).max(0.0);
    if t == 0.0 {
        intrinsic
    } else {
        (-rate * t).exp() * intrinsic
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BasisSpec {
    pub max_total_degree: usize,
    pub include_payoff: bool,
}

impl Default for BasisSpec {
    fn default() -> Self {
        BasisSpec {
            max_total_degree: 4,
            include_payoff: true,
        }
    }
}

fn binomial(n: usize, k: usize) -> usize {
    (0..k).fold(1usize, |acc, i| acc * (n - i) / (i + 1))
}

impl BasisSpec {
    /// `binom(nhat + d, d)` monomials, plus one for the payoff regressor.
    pub fn count(&self, nhat: usize) -> usize {
        binomial(nhat + self.max_total_degree, self.max_total_degree) + usize::from(self.include_payoff)
    }
}

/// Monomials of total degree at most `d` in graded lexicographic order,
/// each stored as `parent * x[var]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolynomialBasis {
    pub nhat: usize,
    pub spec: BasisSpec,
    /// `(parent, var)` for monomials after the constant.
    table: Vec<(usize, usize)>,
    /// Exponent vectors, for reporting.
    pub exponents: Vec<Vec<usize>>,
}

impl PolynomialBasis {
    pub fn new(nhat: usize, spec: BasisSpec) -> Result<Self> {
        if nhat == 0 {
            return Err(Error::Config("basis needs at least one variable".into()));
        }
        // last variable of each monomial, and exponent vectors
        let mut last = vec![0usize];
        let mut exponents = vec![vec![0; nhat]];
        let mut table = Vec::new();
        let mut level: Vec<usize> = vec![0];
        for _ in 0..spec.max_total_degree {
            let mut next = Vec::new();
            for &parent in &level {
                let start = if parent == 0 { 0 } else { last[parent] };
                for var in start..nhat {
                    let mut e = exponents[parent].clone();
                    e[var] += 1;
                    exponents.push(e);
                    last.push(var);
                    table.push((parent, var));
                    next.push(exponents.len() - 1);
                }
            }
            level = next;
        }
        debug_assert_eq!(exponents.len() + usize::from(spec.include_payoff), spec.count(nhat));
        Ok(PolynomialBasis {
            nhat,
            spec,
            table,
            exponents,
        })
    }

    pub fn count(&self) -> usize {
        self.exponents.len() + usize::from(self.spec.include_payoff)
    }

    /// Basis values at `z`, with the payoff as the last regressor.
    pub fn evaluate(&self, z: &[f64], payoff: f64, out: &mut [f64]) {
        out[0] = 1.0;
        for (m, &(parent, var)) in self.table.iter().enumerate() {
            out[m + 1] = out[parent] * z[var];
        }
        if self.spec.include_payoff {
            out[self.exponents.len()] = payoff;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LsOptions {
    /// Regress on in-the-money paths only.
    pub itm_only: bool,
    /// Evaluate the fitted policy on an independent ensemble.
    pub two_pass: bool,
    /// Seed of the evaluation ensemble.
    pub seed: u64,
}

impl Default for LsOptions {
    fn default() -> Self {
        LsOptions {
            itm_only: true,
            two_pass: true,
            seed: 1,
        }
    }
}

/// Fitted continuation value at one exercise date.
#[derive(Debug, Clone, PartialEq)]
pub struct DatePolicy {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Coefficients on the unscaled basis; `None` when no path was in the money.
    pub beta: Option<Vec<f64>>,
    pub regressed_paths: usize,
    pub ridge: bool,
}

/// Exercise policy fitted by backward induction.
#[derive(Debug, Clone, PartialEq)]
pub struct ExercisePolicy {
    pub basis: PolynomialBasis,
    /// One entry per exercise date; `None` at `t = 0` and at the last date.
    pub dates: Vec<Option<DatePolicy>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PricingResult {
    pub nhat: usize,
    pub value: f64,
    pub stderr: f64,
    /// Value of the policy on its own regression ensemble.
    pub in_sample_value: f64,
    pub in_sample_stderr: f64,
    pub m_regress: usize,
    pub m_eval: usize,
    pub basis_count: usize,
    /// Fraction of evaluation paths stopped at each exercise date.
    pub exercise_fractions: Vec<f64>,
    pub pathwise_bound: Option<f64>,
    pub pathwise_bound_stderr: Option<f64>,
}

fn date_indices(ens: &PathEnsemble, spec: &ExerciseSpec) -> Result<Vec<usize>> {
    spec.dates
        .iter()
        .map(|&t| {
            ens.times
                .iter()
                .position(|&s| (s - t).abs() <= 1e-9 * t.max(1.0))
                .ok_or_else(|| Error::Config(format!("exercise date {t} is not stored in the ensemble")))
        })
        .collect()
}

fn check_reduced(ens: &PathEnsemble, k: usize) -> Result<usize> {
    let r = ens
        .reduced
        .get(k)
        .ok_or_else(|| Error::Config(format!("ensemble has no reduced system {k}")))?;
    if r.xhat.is_empty() || r.stat.is_empty() {
        return Err(Error::Config("ensemble lacks reduced states or output statistics".into()));
    }
    Ok(r.nhat)
}

fn standardise(mean: &[f64], std: &[f64], x: &[f64], z: &mut [f64]) {
    for i in 0..x.len() {
        z[i] = (x[i] - mean[i]) / std[i];
    }
}

fn moments(ens: &PathEnsemble, k: usize, d: usize, nhat: usize) -> (Vec<f64>, Vec<f64>) {
    let zero = (vec![0.0; nhat], vec![0.0; nhat]);
    let (s, s2) = par::reduce_chunks(
        ens.paths,
        zero.clone(),
        |range| {
            let (mut s, mut s2) = zero.clone();
            for p in range {
                for (i, &v) in ens.xhat(k, p, d).iter().enumerate() {
                    s[i] += v;
                    s2[i] += v * v;
                }
            }
            (s, s2)
        },
        |(mut a, mut b), (c, e)| {
            for i in 0..nhat {
                a[i] += c[i];
                b[i] += e[i];
            }
            (a, b)
        },
    );
    let m = ens.paths as f64;
    let mean: Vec<f64> = s.iter().map(|v| v / m).collect();
    let std = s2
        .iter()
        .zip(&mean)
        .map(|(v, mu)| {
            let sd = (v / m - mu * mu).max(0.0).sqrt();
            if sd > 1e-12 * mu.abs().max(1e-300) { sd } else { 1.0 }
        })
        .collect();
    (mean, std)
}

/// Least squares `beta` over the selected rows by CholeskyQR2 with unit-RMS
/// column scaling, streamed over fixed path chunks.
fn regress<S, B>(paths: usize, k: usize, nz: usize, select: S, build: B) -> Result<(Vec<f64>, usize, bool)>
where
    S: Fn(usize) -> bool + Sync + Send,
    B: Fn(usize, &mut [f64], &mut [f64]) -> f64 + Sync + Send,
{
    let chunk_rows = |range: std::ops::Range<usize>| {
        let rows: Vec<usize> = range.filter(|&p| select(p)).collect();
        let mut phi = DMatrix::zeros(rows.len(), k);
        let mut y = DVector::zeros(rows.len());
        let mut buf = vec![0.0; k];
        let mut z = vec![0.0; nz];
        for (r, &p) in rows.iter().enumerate() {
            y[r] = build(p, &mut z, &mut buf);
            for c in 0..k {
                phi[(r, c)] = buf[c];
            }
        }
        (phi, y)
    };
    let zero = || (DMatrix::zeros(k, k), 0usize);
    let (gram, count) = par::reduce_chunks(
        paths,
        zero(),
        |range| {
            let (phi, _) = chunk_rows(range);
            (phi.tr_mul(&phi), phi.nrows())
        },
        |(a, n), (b, m)| (a + b, n + m),
    );
    if count == 0 {
        return Err(Error::SingularRegression);
    }
    let scale: DVector<f64> = DVector::from_iterator(
        k,
        (0..k).map(|i| {
            let rms = (gram[(i, i)] / count as f64).sqrt();
            if rms > 0.0 { 1.0 / rms } else { 1.0 }
        }),
    );
    let d = DMatrix::from_diagonal(&scale);
    let scaled = &d * &gram * &d;
    let mut ridge = false;
    let chol = |m: &DMatrix<f64>, ridge: &mut bool| -> Result<DMatrix<f64>> {
        if let Some(c) = m.clone().cholesky() {
            return Ok(c.l().transpose());
        }
        *ridge = true;
        let bump = 1e-10 * m.trace() / k as f64;
        warn!("regression Gram matrix is singular; adding ridge {bump:.3e}");
        let mut reg = m.clone();
        for i in 0..k {
            reg[(i, i)] += bump;
        }
        reg.cholesky().map(|c| c.l().transpose()).ok_or(Error::SingularRegression)
    };
    let r1 = chol(&scaled, &mut ridge)?;
    let r1t = r1.transpose();
    let (gram2, rhs) = par::reduce_chunks(
        paths,
        (DMatrix::zeros(k, k), DVector::zeros(k)),
        |range| {
            let (phi, y) = chunk_rows(range);
            let scaled_t = &d * phi.transpose();
            let psi_t = r1t.solve_lower_triangular(&scaled_t).expect("triangular factor is nonsingular");
            (&psi_t * psi_t.transpose(), &psi_t * y)
        },
        |(a, b), (c, e)| (a + c, b + e),
    );
    let r2 = chol(&gram2, &mut ridge)?;
    let t = r2
        .transpose()
        .solve_lower_triangular(&rhs)
        .and_then(|t| r2.solve_upper_triangular(&t))
        .and_then(|t| r1.solve_upper_triangular(&t))
        .ok_or(Error::SingularRegression)?;
    let beta = t.component_mul(&scale);
    if beta.iter().any(|b| !b.is_finite()) {
        return Err(Error::SingularRegression);
    }
    Ok((beta.iter().copied().collect(), count, ridge))
}

/// In-sample backward induction on reduced system `k` of `ens`.
///
/// Returns the policy together with the realised stopped payoff of every
/// regression path.
pub fn fit_policy(
    ens: &PathEnsemble,
    k: usize,
    spec: &ExerciseSpec,
    basis_spec: BasisSpec,
    itm_only: bool,
) -> Result<(ExercisePolicy, Vec<f64>)> {
    spec.validate()?;
    let nhat = check_reduced(ens, k)?;
    let idx = date_indices(ens, spec)?;
    let basis = PolynomialBasis::new(nhat, basis_spec)?;
    let count = basis.count();
    let needs_regression = spec.dates.iter().filter(|&&t| t > 0.0).count() > 1;
    if needs_regression && ens.paths < PATHS_PER_BASIS * count {
        return Err(Error::InsufficientPaths {
            paths: ens.paths,
            basis: count,
            needed: PATHS_PER_BASIS * count,
        });
    }
    let nd = spec.dates.len();
    let last = nd - 1;
    let f = |p: usize, j: usize| spec.payoff(ens.stat_hat(k, p, idx[j]), spec.dates[j]);
    let mut cf: Vec<f64> = (0..ens.paths).map(|p| f(p, last)).collect();
    let mut dates = vec![None; nd];
    for j in (0..last).rev() {
        if spec.dates[j] == 0.0 {
            continue;
        }
        let (mean, std) = moments(ens, k, idx[j], nhat);
        let select = |p: usize| !itm_only || f(p, j) > 0.0;
        let build = |p: usize, z: &mut [f64], buf: &mut [f64]| {
            standardise(&mean, &std, ens.xhat(k, p, idx[j]), z);
            basis.evaluate(z, f(p, j), buf);
            cf[p]
        };
        let any = (0..ens.paths).any(select);
        let (beta, regressed, ridge) = if any {
            let (b, n, r) = regress(ens.paths, count, nhat, select, build)?;
            (Some(b), n, r)
        } else {
            (None, 0, false)
        };
        let policy = DatePolicy {
            mean,
            std,
            beta,
            regressed_paths: regressed,
            ridge,
        };
        // exercise decisions on the regression paths
        let decisions: Vec<Vec<bool>> = par::map_chunks(ens.paths, |range| {
            let mut buf = vec![0.0; count];
            let mut z = vec![0.0; nhat];
            range
                .map(|p| {
                    let fp = f(p, j);
                    fp > 0.0 && continuation(&policy, &basis, ens.xhat(k, p, idx[j]), fp, &mut z, &mut buf).is_some_and(|c| fp >= c)
                })
                .collect()
        });
        for (p, ex) in decisions.into_iter().flatten().enumerate() {
            if ex {
                cf[p] = f(p, j);
            }
        }
        dates[j] = Some(policy);
    }
    Ok((ExercisePolicy { basis, dates }, cf))
}

fn continuation(
    policy: &DatePolicy,
    basis: &PolynomialBasis,
    x: &[f64],
    payoff: f64,
    z: &mut [f64],
    buf: &mut [f64],
) -> Option<f64> {
    let beta = policy.beta.as_ref()?;
    standardise(&policy.mean, &policy.std, x, z);
    basis.evaluate(z, payoff, buf);
    Some(buf.iter().zip(beta).map(|(a, b)| a * b).sum())
}

/// Stopped discounted payoffs and stopping date index of every path in
/// `ens` under `policy`.
pub fn apply_policy(ens: &PathEnsemble, k: usize, spec: &ExerciseSpec, policy: &ExercisePolicy) -> Result<Vec<(f64, usize)>> {
    let nhat = check_reduced(ens, k)?;
    if nhat != policy.basis.nhat {
        return Err(Error::DimensionMismatch("policy and ensemble have different reduced orders".into()));
    }
    let idx = date_indices(ens, spec)?;
    let nd = spec.dates.len();
    let count = policy.basis.count();
    let chunks = par::map_chunks(ens.paths, |range| {
        let mut buf = vec![0.0; count];
        let mut z = vec![0.0; nhat];
        range
            .map(|p| {
                for j in 0..nd {
                    if spec.dates[j] == 0.0 {
                        continue;
                    }
                    let fp = spec.payoff(ens.stat_hat(k, p, idx[j]), spec.dates[j]);
                    if j == nd - 1 {
                        return (fp, j);
                    }
                    if fp > 0.0 {
                        if let Some(dp) = &policy.dates[j] {
                            if continuation(dp, &policy.basis, ens.xhat(k, p, idx[j]), fp, &mut z, &mut buf).is_some_and(|c| fp >= c) {
                                return (fp, j);
                            }
                        }
                    }
                }
                unreachable!("last date always stops")
            })
            .collect::<Vec<_>>()
    });
    Ok(chunks.into_iter().flatten().collect())
}

/// Value at time zero from stopped payoffs, with the `t = 0` comparison.
fn summarise(ens: &PathEnsemble, k: usize, spec: &ExerciseSpec, stopped: &[(f64, usize)]) -> (f64, f64, Vec<f64>) {
    let values: Vec<f64> = stopped.iter().map(|s| s.0).collect();
    let (mean, se) = mean_stderr(&values);
    let nd = spec.dates.len();
    let mut fractions = vec![0.0; nd];
    for s in stopped {
        fractions[s.1] += 1.0;
    }
    for fr in fractions.iter_mut() {
        *fr /= stopped.len() as f64;
    }
    if spec.dates[0] == 0.0 {
        let idx0 = date_indices(ens, spec).expect("checked")[0];
        let f0 = spec.payoff(ens.stat_hat(k, 0, idx0), 0.0);
        if f0 > 0.0 && f0 >= mean {
            let mut fr = vec![0.0; nd];
            fr[0] = 1.0;
            return (f0, 0.0, fr);
        }
    }
    (mean, se, fractions)
}

/// Mean over paths of `max_j |f_j(y(t_j)) - f_j(y-hat(t_j))|` with its
/// standard error.
pub fn pathwise_error_bound(ens: &PathEnsemble, k: usize, spec: &ExerciseSpec) -> Result<(f64, f64)> {
    check_reduced(ens, k)?;
    if ens.stat.is_empty() {
        return Err(Error::Config("ensemble lacks full output statistics".into()));
    }
    let idx = date_indices(ens, spec)?;
    let gaps: Vec<f64> = (0..ens.paths)
        .map(|p| {
            idx.iter()
                .zip(&spec.dates)
                .map(|(&d, &t)| (spec.payoff(ens.stat(p, d), t) - spec.payoff(ens.stat_hat(k, p, d), t)).abs())
                .fold(0.0, f64::max)
        })
        .collect();
    Ok(mean_stderr(&gaps))
}

/// Longstaff-Schwartz on reduced system `k`: fit on `regress`, evaluate on
/// `eval` when given (two-pass) or in sample otherwise.
pub fn longstaff_schwartz(
    regress: &PathEnsemble,
    eval: Option<&PathEnsemble>,
    k: usize,
    spec: &ExerciseSpec,
    basis: BasisSpec,
    opts: &LsOptions,
) -> Result<PricingResult> {
    let (policy, cf) = fit_policy(regress, k, spec, basis, opts.itm_only)?;
    let in_sample: Vec<(f64, usize)> = apply_policy(regress, k, spec, &policy)?;
    debug_assert!(in_sample.iter().zip(&cf).all(|(a, b)| a.0 == *b));
    let (is_value, is_se, is_fr) = summarise(regress, k, spec, &in_sample);
    let (value, stderr, fractions, m_eval, target) = match (opts.two_pass, eval) {
        (true, Some(e)) => {
            let stopped = apply_policy(e, k, spec, &policy)?;
            let (v, s, fr) = summarise(e, k, spec, &stopped);
            (v, s, fr, e.paths, e)
        }
        (true, None) => return Err(Error::Config("two-pass pricing needs an evaluation ensemble".into())),
        (false, _) => (is_value, is_se, is_fr, regress.paths, regress),
    };
    let bound = if target.stat.is_empty() {
        None
    } else {
        Some(pathwise_error_bound(target, k, spec)?)
    };
    Ok(PricingResult {
        nhat: policy.basis.nhat,
        value,
        stderr,
        in_sample_value: is_value,
        in_sample_stderr: is_se,
        m_regress: regress.paths,
        m_eval,
        basis_count: policy.basis.count(),
        exercise_fractions: fractions,
        pathwise_bound: bound.map(|b| b.0),
        pathwise_bound_stderr: bound.map(|b| b.1),
    })
}

/// Monte Carlo sizes for [`price_reduced_models`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PricingSimulation {
    pub paths_regress: usize,
    pub paths_eval: usize,
    pub dt: f64,
    /// Seed of the regression ensemble; the evaluation ensemble uses the
    /// seed in [`LsOptions`].
    pub seed: u64,
}

/// Simulate coupled ensembles for all reduced systems at once, fit one
/// policy per system, evaluate it and estimate the pathwise bound.
pub fn price_reduced_models(
    sys: &SystemCoefficients,
    reds: &[ReducedSystem],
    noise: &NoiseSpec,
    spec: &ExerciseSpec,
    basis: BasisSpec,
    opts: &LsOptions,
    sim: &PricingSimulation,
) -> Result<Vec<PricingResult>> {
    spec.validate()?;
    if opts.two_pass && opts.seed == sim.seed {
        return Err(Error::Config("evaluation seed must differ from the regression seed".into()));
    }
    let make = |paths, seed| SimulationOptions {
        statistic: Some(spec.payoff_kind.statistic()),
        ..SimulationOptions::new(paths, sim.dt, spec.dates.clone(), seed)
    };
    let regress = simulate::simulate_coupled(sys, reds, noise, &make(sim.paths_regress, sim.seed))?;
    let fitted = (0..reds.len())
        .map(|k| {
            let (policy, _) = fit_policy(&regress, k, spec, basis, opts.itm_only)?;
            let stopped = apply_policy(&regress, k, spec, &policy)?;
            Ok((policy, summarise(&regress, k, spec, &stopped)))
        })
        .collect::<Result<Vec<_>>>()?;
    let eval_owned;
    let eval = if opts.two_pass {
        drop(regress);
        eval_owned = simulate::simulate_coupled(sys, reds, noise, &make(sim.paths_eval, opts.seed))?;
        eval_owned
    } else {
        regress
    };
    fitted
        .into_iter()
        .enumerate()
        .map(|(k, (policy, (is_value, is_se, _)))| {
            let stopped = apply_policy(&eval, k, spec, &policy)?;
            let (value, stderr, fractions) = summarise(&eval, k, spec, &stopped);
            let (bound, bound_se) = pathwise_error_bound(&eval, k, spec)?;
            Ok(PricingResult {
                nhat: policy.basis.nhat,
                value,
                stderr,
                in_sample_value: is_value,
                in_sample_stderr: is_se,
                m_regress: sim.paths_regress,
                m_eval: eval.paths,
                basis_count: policy.basis.count(),
                exercise_fractions: fractions,
                pathwise_bound: Some(bound),
                pathwise_bound_stderr: Some(bound_se),
            })
        })
        .collect()
}
