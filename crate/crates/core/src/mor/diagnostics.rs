use log::warn;
use nalgebra::DMatrix;

use crate::covariance::{self, CovarianceSolution, GramianOptions, GramianSet, TrajectorySet};
use crate::error::{Error, Result};
use crate::linalg::{devectorize, vectorize, CheckedLu};
use crate::linsys::{
    mean_square_stability, reduced_mean_square_stability, InitialExpansion, ReducedSystem,
    SystemCoefficients,
};

use super::ReductionDiagnostics;

/// Bound value after clipping, with the raw value kept for reporting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorBound {
    pub value: f64,
    pub raw: f64,
    pub clipped: bool,
}

/// Relative residuals `||lhs - rhs|| / max(||rhs||, eps)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Residuals {
    pub values: [f64; 4],
    /// At least one residual had both sides vanishing and was reported as 0.
    pub zero_over_zero: bool,
}

fn relative(lhs: &DMatrix<f64>, rhs: &DMatrix<f64>) -> (f64, bool) {
    ratio((lhs - rhs).norm(), rhs.norm())
}

fn ratio(diff: f64, scale: f64) -> (f64, bool) {
    if scale < f64::MIN_POSITIVE {
        if diff < f64::MIN_POSITIVE {
            (0.0, true)
        } else {
            (diff / f64::MIN_POSITIVE, false)
        }
    } else {
        (diff / scale, false)
    }
}

/// `(tr(C P C^T) - 2 tr(C P-tilde C-hat^T) + tr(C-hat P-hat C-hat^T)) ||z0||^2`.
pub fn error_bound(
    sys: &SystemCoefficients,
    red: &ReducedSystem,
    gram: &GramianSet,
    z0: &InitialExpansion,
) -> Result<ErrorBound> {
    let p = gram.p.as_ref().ok_or(Error::MissingGramian("P"))?;
    let full = (&sys.c * p * sys.c.transpose()).trace();
    let cross = (&sys.c * &gram.p_tilde * red.c.transpose()).trace();
    let reduced = (&red.c * &gram.p_hat * red.c.transpose()).trace();
    let raw = (full - 2.0 * cross + reduced) * z0.norm_squared();
    if raw < 0.0 {
        if raw < -1e-10 * full.abs() * z0.norm_squared() {
            warn!("error bound is negative beyond round-off: {raw:.3e}");
        }
        return Ok(ErrorBound {
            value: 0.0,
            raw,
            clipped: true,
        });
    }
    Ok(ErrorBound {
        value: raw,
        raw,
        clipped: false,
    })
}

/// `sum_j N_j k_ij` for every `i`.
fn noise_weights(noise: &[DMatrix<f64>], k: &DMatrix<f64>) -> Vec<DMatrix<f64>> {
    let q = noise.len();
    (0..q)
        .map(|i| {
            let mut w = DMatrix::zeros(noise[0].nrows(), noise[0].ncols());
            for (j, nj) in noise.iter().enumerate() {
                if k[(i, j)] != 0.0 {
                    w += nj * k[(i, j)];
                }
            }
            w
        })
        .collect()
}

/// Finite-horizon optimality residuals (a)-(d).
pub fn optimality_residuals(
    sys: &SystemCoefficients,
    red: &ReducedSystem,
    gram: &GramianSet,
    trajs: &TrajectorySet,
) -> Result<Residuals> {
    let mut flag = false;
    let mut record = |r: (f64, bool)| {
        flag |= r.1;
        r.0
    };
    let a = record(relative(&(&red.c * &gram.p_hat), &(&sys.c * &gram.p_tilde)));
    let b = record(relative(
        &(&gram.q_hat * &red.x0),
        &(gram.q_tilde.transpose() * &sys.x0),
    ));

    let q_hat_run = covariance::running_integral(&trajs.g_hat)?;
    let q_tilde_run_t = covariance::running_integral(&trajs.g_tilde)?.transpose();

    let w_hat = noise_weights(&red.noise, &sys.k_m);
    let w_full = noise_weights(&sys.noise, &sys.k_m);
    let eye_hat = DMatrix::identity(red.nhat(), red.nhat());
    let eye_full = DMatrix::identity(sys.n(), sys.n());

    let mut lhs_weights: Vec<&DMatrix<f64>> = vec![&eye_hat];
    lhs_weights.extend(w_hat.iter());
    let mut rhs_weights: Vec<&DMatrix<f64>> = vec![&eye_full];
    rhs_weights.extend(w_full.iter());

    let lhs = covariance::convolution_integrals(&q_hat_run, &trajs.f_hat, &lhs_weights)?;
    let rhs = covariance::convolution_integrals(&q_tilde_run_t, &trajs.f_tilde, &rhs_weights)?;

    let c = record(relative(&lhs[0].value, &rhs[0].value));
    let mut d: f64 = 0.0;
    let mut d_all_zero = true;
    for (l, r) in lhs.iter().zip(&rhs).skip(1) {
        let (v, z) = relative(&l.value, &r.value);
        d = d.max(v);
        d_all_zero &= z;
    }
    if d_all_zero {
        flag = true;
    }
    Ok(Residuals {
        values: [a, b, c, d],
        zero_over_zero: flag,
    })
}

/// `(||V F-hat(T) - F-tilde(T)|| / ||F-tilde(T)||,
///   ||W (V^T W)^{-1} G-hat(T) - G-tilde(T)|| / ||G-tilde(T)||)`.
pub fn terminal_covariance_error(red: &ReducedSystem, gram: &GramianSet) -> Result<(f64, f64)> {
    let f_hat = gram.f_hat.as_ref().ok_or(Error::MissingGramian("F-hat(T)"))?;
    let f_tilde = gram.f_tilde.as_ref().ok_or(Error::MissingGramian("F-tilde(T)"))?;
    let g_hat = gram.g_hat.as_ref().ok_or(Error::MissingGramian("G-hat(T)"))?;
    let g_tilde = gram.g_tilde.as_ref().ok_or(Error::MissingGramian("G-tilde(T)"))?;
    let primal = relative(&(&red.v * f_hat), f_tilde).0;
    let dual = relative(&(w_vtw_inv(red)? * g_hat), g_tilde).0;
    Ok((primal, dual))
}

/// `W (V^T W)^{-1}`.
fn w_vtw_inv(red: &ReducedSystem) -> Result<DMatrix<f64>> {
    let vtw = red.v.transpose() * &red.w;
    let lu = CheckedLu::new(&vtw.transpose()).ok_or(Error::NearSingularProjection {
        cond: f64::INFINITY,
        threshold: crate::linsys::DEFAULT_COND_THRESHOLD,
    })?;
    // X = W (V^T W)^{-1}  <=>  (V^T W)^T X^T = W^T
    Ok(lu.solve_matrix(&red.w.transpose()).transpose())
}

/// Residuals of the identities
/// `V P-hat - P-tilde = V L-hat^{-1}[F-hat(T) - (W^T V)^{-1} W^T F-tilde(T)]` and
/// `W (V^T W)^{-1} Q-hat - Q-tilde = W (V^T W)^{-1} L-hat^{-*}[G-hat(T) - V^T G-tilde(T)]`,
/// relative to `||P-tilde||` and `||Q-tilde||`. Both hold exactly when
/// `im V` contains the columns of `P-tilde` and `im W` those of `Q-tilde`.
pub fn fixed_point_identity_check(
    sys: &SystemCoefficients,
    red: &ReducedSystem,
    gram: &GramianSet,
) -> Result<(f64, f64)> {
    let f_hat = gram.f_hat.as_ref().ok_or(Error::MissingGramian("F-hat(T)"))?;
    let f_tilde = gram.f_tilde.as_ref().ok_or(Error::MissingGramian("F-tilde(T)"))?;
    let g_hat = gram.g_hat.as_ref().ok_or(Error::MissingGramian("G-hat(T)"))?;
    let g_tilde = gram.g_tilde.as_ref().ok_or(Error::MissingGramian("G-tilde(T)"))?;
    let nhat = red.nhat();
    let k_hat = red.kron(&sys.k_m)?;
    let lu = k_hat.lu().ok_or(Error::SingularReducedOperator)?;
    let lu_t = k_hat.transpose().lu().ok_or(Error::SingularReducedOperator)?;

    let wtv = red.w.transpose() * &red.v;
    let wtv_lu = CheckedLu::new(&wtv).ok_or(Error::NearSingularProjection {
        cond: f64::INFINITY,
        threshold: crate::linsys::DEFAULT_COND_THRESHOLD,
    })?;
    let proj_f = wtv_lu.solve_matrix(&(red.w.transpose() * f_tilde));
    let inner = devectorize(&lu.solve(&vectorize(&(f_hat - proj_f))), nhat, nhat);
    let lhs = &red.v * &gram.p_hat - &gram.p_tilde;
    let rhs = &red.v * inner;
    let (r1, _) = ratio((&lhs - &rhs).norm(), gram.p_tilde.norm());

    let wv = w_vtw_inv(red)?;
    let inner_d = devectorize(
        &lu_t.solve(&vectorize(&(g_hat - red.v.transpose() * g_tilde))),
        nhat,
        nhat,
    );
    let lhs_d = &wv * &gram.q_hat - &gram.q_tilde;
    let rhs_d = &wv * inner_d;
    let (r2, _) = ratio((&lhs_d - &rhs_d).norm(), gram.q_tilde.norm());
    Ok((r1, r2))
}

/// Limit Gramians from
/// `K vec P = -vec(X0 X0^T)`, `K-hat vec P-hat = -vec(X0-hat X0-hat^T)`,
/// `K-tilde vec P-tilde = -vec(X0 X0-hat^T)` and the dual systems.
/// Full-order `P`, `Q` are solved only when `full` is set.
pub fn limit_gramians(sys: &SystemCoefficients, red: &ReducedSystem, full: bool) -> Result<GramianSet> {
    let st = mean_square_stability(sys)?;
    if !st.stable {
        return Err(Error::UnstableSystem {
            abscissa: st.spectral_abscissa,
        });
    }
    let st_red = reduced_mean_square_stability(red, &sys.k_m)?;
    if !st_red.stable {
        return Err(Error::UnstableSystem {
            abscissa: st_red.spectral_abscissa,
        });
    }
    let solve = |kron: &crate::linsys::KronMatrix, rhs: DMatrix<f64>| -> Result<DMatrix<f64>> {
        let sol = kron
            .solve(&(-vectorize(&rhs)))
            .ok_or(Error::SingularKronecker)?;
        Ok(devectorize(&sol, kron.rows, kron.cols))
    };
    let k_hat = red.kron(&sys.k_m)?;
    let k_tilde = red.mixed_kron(sys)?;
    let p_hat = solve(&k_hat, &red.x0 * red.x0.transpose())?;
    let q_hat = solve(&k_hat.transpose(), red.c.transpose() * &red.c)?;
    let p_tilde = solve(&k_tilde, &sys.x0 * red.x0.transpose())?;
    let q_tilde = solve(&k_tilde.transpose(), sys.c.transpose() * &red.c)?;
    let (p, q) = if full {
        let k = sys.kron();
        (
            Some(solve(&k, &sys.x0 * sys.x0.transpose())?),
            Some(solve(&k.transpose(), sys.c.transpose() * &sys.c)?),
        )
    } else {
        (None, None)
    };
    Ok(GramianSet {
        p,
        q,
        p_hat,
        q_hat,
        p_tilde,
        q_tilde,
        f: None,
        g: None,
        f_hat: None,
        g_hat: None,
        f_tilde: None,
        g_tilde: None,
        horizon: f64::INFINITY,
        quadrature_rel_diff: 0.0,
    })
}

/// Infinite-horizon optimality residuals:
/// (a) `C-hat P-hat = C P-tilde`, (b) `Q-hat X0-hat = Q-tilde^T X0`,
/// (c) `Q-hat P-hat = Q-tilde^T P-tilde`,
/// (d) `Q-hat (sum_j N-hat_j k_ij) P-hat = Q-tilde^T (sum_j N_j k_ij) P-tilde`, max over `i`.
pub fn limit_optimality_residuals(
    sys: &SystemCoefficients,
    red: &ReducedSystem,
    gram: &GramianSet,
) -> Result<Residuals> {
    let mut flag = false;
    let mut record = |r: (f64, bool)| {
        flag |= r.1;
        r.0
    };
    let qt_t = gram.q_tilde.transpose();
    let a = record(relative(&(&red.c * &gram.p_hat), &(&sys.c * &gram.p_tilde)));
    let b = record(relative(&(&gram.q_hat * &red.x0), &(&qt_t * &sys.x0)));
    let c = record(relative(&(&gram.q_hat * &gram.p_hat), &(&qt_t * &gram.p_tilde)));
    let w_hat = noise_weights(&red.noise, &sys.k_m);
    let w_full = noise_weights(&sys.noise, &sys.k_m);
    let mut d: f64 = 0.0;
    let mut all_zero = true;
    for (wh, wf) in w_hat.iter().zip(&w_full) {
        let (v, z) = relative(
            &(&gram.q_hat * wh * &gram.p_hat),
            &(&qt_t * wf * &gram.p_tilde),
        );
        d = d.max(v);
        all_zero &= z;
    }
    if all_zero {
        flag = true;
    }
    Ok(Residuals {
        values: [a, b, c, d],
        zero_over_zero: flag,
    })
}

/// `(||V P-hat - P-tilde|| / ||P-tilde||, ||W (V^T W)^{-1} Q-hat - Q-tilde|| / ||Q-tilde||)`.
pub fn limit_fit(red: &ReducedSystem, gram: &GramianSet) -> Result<(f64, f64)> {
    let p = relative(&(&red.v * &gram.p_hat), &gram.p_tilde).0;
    let q = relative(&(w_vtw_inv(red)? * &gram.q_hat), &gram.q_tilde).0;
    Ok((p, q))
}

/// How much of the diagnostics to compute after a reduction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiagnosticsLevel {
    None,
    /// Everything that needs only reduced and mixed solves.
    Reduced,
    /// Also the full-order Gramians and the error bound.
    Full,
}

/// Fill the finite-horizon (and, on request, infinite-horizon) diagnostics.
pub fn diagnose(
    sys: &SystemCoefficients,
    red: &ReducedSystem,
    level: DiagnosticsLevel,
    grid: usize,
    limits: bool,
    memory_budget: u64,
    out: &mut ReductionDiagnostics,
) -> Result<Option<CovarianceSolution>> {
    if level == DiagnosticsLevel::None {
        return Ok(None);
    }
    let opts = GramianOptions {
        grid,
        full: level == DiagnosticsLevel::Full,
        memory_budget,
    };
    let sol = covariance::solve_all(sys, red, &opts)?;
    let gram = &sol.gramians;
    if gram.p.is_some() {
        let b = error_bound(sys, red, gram, &InitialExpansion::new(unit_z0(sys.m())))?;
        out.bound_value = Some(b.value);
        out.bound_raw = Some(b.raw);
    }
    out.terminal_cov_err = Some(terminal_covariance_error(red, gram)?);
    let res = optimality_residuals(sys, red, gram, &sol.trajectories)?;
    out.opt_residuals = Some(res.values);
    out.zero_over_zero |= res.zero_over_zero;
    out.identity_residuals = Some(fixed_point_identity_check(sys, red, gram)?);
    if limits {
        let lg = limit_gramians(sys, red, false)?;
        let lr = limit_optimality_residuals(sys, red, &lg)?;
        out.limit_residuals = Some(lr.values);
        out.zero_over_zero |= lr.zero_over_zero;
        out.limit_fit = Some(limit_fit(red, &lg)?);
    }
    Ok(Some(sol))
}

fn unit_z0(m: usize) -> nalgebra::DVector<f64> {
    // ||z0|| = 1; the bound scales with ||z0||^2 only
    let mut z = nalgebra::DVector::zeros(m);
    z[0] = 1.0;
    z
}
