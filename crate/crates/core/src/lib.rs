//! Model order reduction for linear stochastic asset-price models, with
//! certified error bounds and Bermudan option pricing on the reduced model.
//!
//! The crate is organised bottom-up:
//!
//! - [`linsys`]: model data, Lyapunov/Kronecker operators, Petrov-Galerkin projection.
//! - [`covariance`]: covariance ODEs, Gramians, convolution integrals.
//! - [`mor`]: the Sylvester fixed-point iteration, error bound, optimality
//!   residuals, Hankel singular values.
//! - [`simulate`]: coupled Monte Carlo of full and reduced systems, Heston-type noise.
//! - [`pricing`]: Longstaff-Schwartz on the reduced state and the pathwise bound.
//! - [`cli`]: the `stochmor` command-line front end.
//!
//! Each capability has a runnable example:
//!
//! ```text
//! cargo run --release --example scalar_closed_forms
//! cargo run --release --example reduce_basket
//! cargo run --release --example infinite_horizon
//! cargo run --release --example hankel_singular_values
//! cargo run --release --example coupled_simulation
//! cargo run --release --example heston_domination
//! cargo run --release --example bermudan_basket
//! cargo run --release --example model_roundtrip
//! ```

pub mod cli;
pub mod covariance;
pub mod error;
pub mod io;
pub mod linalg;
pub mod linsys;
pub mod models;
pub mod mor;
pub mod par;
pub mod pricing;
pub mod simulate;

pub use error::{Error, Result};
pub use linsys::{InitialExpansion, ReducedSystem, SystemCoefficients};
