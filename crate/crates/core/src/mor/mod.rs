//! Model order reduction: the Sylvester fixed-point iteration and its
//! infinite-horizon variant, error bounds, optimality residuals and Hankel
//! singular values.

mod diagnostics;
mod fixed_point;
mod hsv;

pub use diagnostics::{
    diagnose, error_bound, fixed_point_identity_check, limit_fit, limit_gramians,
    limit_optimality_residuals, optimality_residuals, terminal_covariance_error, DiagnosticsLevel,
    ErrorBound, Residuals,
};
pub use fixed_point::{
    krylov_initial_guess, stable_fixed_point, sylvester_fixed_point, FixedPointOptions, InitialGuess,
};
pub use hsv::{hankel_singular_values, HsvReport};

use serde::{Deserialize, Serialize};

use crate::linsys::ReducedSystem;

/// Everything a reduction run reports besides the reduced coefficients.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReductionDiagnostics {
    /// Error bound for `||z0|| = 1`; absent when the full Gramians were skipped.
    pub bound_value: Option<f64>,
    /// Raw bound before clipping of a negative round-off value.
    pub bound_raw: Option<f64>,
    /// Relative terminal covariance errors (primal, dual).
    pub terminal_cov_err: Option<(f64, f64)>,
    /// Finite-horizon optimality residuals (a)-(d).
    pub opt_residuals: Option<[f64; 4]>,
    /// Fixed-point identity residuals (primal, dual).
    pub identity_residuals: Option<(f64, f64)>,
    /// Infinite-horizon optimality residuals (a)-(d).
    pub limit_residuals: Option<[f64; 4]>,
    /// `||V P-hat - P-tilde|| / ||P-tilde||` and the dual analogue, infinite horizon.
    pub limit_fit: Option<(f64, f64)>,
    pub iterations: usize,
    pub converged: bool,
    pub subspace_change_history: Vec<f64>,
    /// Some residual had a vanishing reference norm and was reported as 0.
    pub zero_over_zero: bool,
    /// Re-initialisations after unstable iterates.
    pub retries: usize,
}

/// Reduced system plus diagnostics.
#[derive(Debug, Clone)]
pub struct Reduction {
    pub red: ReducedSystem,
    pub diagnostics: ReductionDiagnostics,
}
