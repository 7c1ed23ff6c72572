//! Monte Carlo laboratory for mean-field (McKean-Vlasov) forward-backward SDEs.
//!
//! The crate solves the limit equations, an approximation in which the
//! law of the solution is replaced by `N` independent environment copies,
//! and the classical interacting particle system; it measures the `1/N`
//! mean-square convergence rate and compares the `sqrt(N)` fluctuations
//! with a linear limit system driven by a Gaussian field.

pub mod backward;
pub mod error;
pub mod fluctuation;
pub mod forward;
pub mod harness;
pub mod model;
pub mod noise;
pub mod regression;
pub mod stats;

pub use error::{Error, Result};
