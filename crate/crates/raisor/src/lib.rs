//! RAISOR: recursive adaptive importance sampling with threshold-triggered
//! replenishment, for fitting low-dimensional Bayesian models in parallel.
//!
//! The crate is organized around five pieces:
//!
//! - [`sampling`]: weighted-sample primitives (log-space normalization,
//!   self-normalized estimators, relative effective sample size, weighted SIR)
//! - [`proposal`]: Gaussian-mixture proposals, weighted EM adaptation, and
//!   f-divergence estimators
//! - [`models`]: the model interface plus a conjugate normal mean and a
//!   Vecchia-approximated Gaussian-process regression
//! - [`engine`]: the orchestrator alternating recursive weight updates with
//!   replenishment, batch-ladder search, and annealed rescue
//! - [`theory`] and [`mcmc`]: closed-form oracles for the limiting sample
//!   quality, and a Metropolis-within-Gibbs baseline for the GP model

pub mod engine;
pub mod error;
mod math;
pub mod mcmc;
pub mod models;
pub mod proposal;
pub mod sampling;
pub mod theory;
pub mod transform;

pub use error::{Error, Result};
