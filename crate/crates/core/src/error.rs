use std::io;

use thiserror::Error;

/// Every failure the library can report.
///
/// The variants double as error classes for the command-line front end:
/// [`Error::exit_code`] maps each one to a distinct process exit status.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("covariance matrix is not positive semidefinite (min eigenvalue {min_eig:.3e}, max {max_eig:.3e})")]
    NotPositiveSemidefinite { min_eig: f64, max_eig: f64 },

    #[error("projection pair is near singular: cond(W^T V) = {cond:.3e} exceeds {threshold:.3e}")]
    NearSingularProjection { cond: f64, threshold: f64 },

    #[error("numerical rank {rank} is below the requested order {requested}")]
    RankDeficient { rank: usize, requested: usize },

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("Kronecker operator is singular to working precision")]
    SingularKronecker,

    #[error("reduced Lyapunov operator is singular to working precision")]
    SingularReducedOperator,

    #[error("memory budget exceeded: {needed} bytes requested, budget {budget} bytes")]
    MemoryBudgetExceeded { needed: u64, budget: u64 },

    #[error("trajectories are not defined on the same time grid")]
    GridMismatch,

    #[error("gramian {0} is required but was not computed")]
    MissingGramian(&'static str),

    #[error("fixed-point iteration did not converge within {iterations} iterations (last subspace change {last_change:.3e})")]
    NotConverged {
        iterations: usize,
        last_change: f64,
        best: Box<crate::mor::Reduction>,
    },

    #[error("system is not mean-square asymptotically stable (spectral abscissa {abscissa:.6e})")]
    UnstableSystem { abscissa: f64 },

    #[error("reduced iterate remained unstable after {retries} re-initialisations")]
    UnstableIterate { retries: usize },

    #[error("model is not a diagonal Black-Scholes model")]
    NotDiagonalModel,

    #[error("time step {dt} is coarser than the smallest observation gap {gap}")]
    StepTooCoarse { dt: f64, gap: f64 },

    #[error("capped volatility requested but no cap was given")]
    CapMissing,

    #[error("insufficient paths for regression: {paths} paths for {basis} basis functions (need {needed})")]
    InsufficientPaths {
        paths: usize,
        basis: usize,
        needed: usize,
    },

    #[error("regression is singular")]
    SingularRegression,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// Process exit status for this error class. `0` and `1` are reserved
    /// for success and argument errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::DimensionMismatch(_) => 10,
            Error::InvalidModel(_) => 11,
            Error::NotPositiveSemidefinite { .. } => 12,
            Error::NearSingularProjection { .. } => 13,
            Error::RankDeficient { .. } => 14,
            Error::NumericalFailure(_) => 15,
            Error::SingularKronecker => 16,
            Error::SingularReducedOperator => 17,
            Error::MemoryBudgetExceeded { .. } => 18,
            Error::GridMismatch => 19,
            Error::MissingGramian(_) => 20,
            Error::NotConverged { .. } => 21,
            Error::UnstableSystem { .. } => 22,
            Error::UnstableIterate { .. } => 23,
            Error::NotDiagonalModel => 24,
            Error::StepTooCoarse { .. } => 25,
            Error::CapMissing => 26,
            Error::InsufficientPaths { .. } => 27,
            Error::SingularRegression => 28,
            Error::Config(_) => 29,
            Error::Parse { .. } => 30,
            Error::Io(_) => 31,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
