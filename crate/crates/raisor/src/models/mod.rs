//! Model interface and the two built-in models: a conjugate normal mean with
//! closed-form posterior, and Gaussian-process regression with Matérn
//! covariance under a nearest-neighbor Vecchia approximation.

mod conjugate;
pub mod matern;
mod vecchia;

pub mod gp;

pub use conjugate::ConjugateNormalModel;
pub use gp::{GpModel, GpPriors, PredictionSummary};
pub use vecchia::{build_vecchia, default_k, DistanceMetric, VecchiaFactor, VecchiaStructure};

use nalgebra::DVector;
use rand::RngCore;
use rayon::prelude::*;

use crate::error::Result;
use crate::transform::Transform;

/// A Bayesian model over a fixed observation sequence, exposing prior
/// sampling/density and batched conditional log-likelihoods.
///
/// Implementations are immutable after construction and shareable read-only
/// across worker threads; `batch_loglik` is pure given `(theta, range)`.
pub trait Model: Sync {
    /// Parameter dimension (same in model and unconstrained space).
    fn dim(&self) -> usize;

    /// Length of the observation sequence.
    fn n_obs(&self) -> usize;

    /// Bijection from model space onto the unconstrained space.
    fn transform(&self) -> &Transform;

    /// `count` i.i.d. prior draws in model space.
    fn prior_sample(&self, count: usize, rng: &mut dyn RngCore) -> Vec<DVector<f64>>;

    /// Log prior density in model space; `-inf` outside the support.
    fn log_prior(&self, theta: &DVector<f64>) -> f64;

    /// `log [y_{from+1:to} | theta, y_{1:from}]` for `0 <= from < to <= n`.
    /// Additive over consecutive batches.
    fn batch_loglik(&self, theta: &DVector<f64>, from: usize, to: usize) -> Result<f64>;

    /// Batched conditional log-likelihood for many parameter vectors; the
    /// default fans out over particles with rayon. Models with shared
    /// sufficient statistics override this.
    fn batch_loglik_block(
        &self,
        thetas: &[DVector<f64>],
        from: usize,
        to: usize,
    ) -> Result<Vec<f64>> {
        thetas
            .par_iter()
            .map(|t| self.batch_loglik(t, from, to))
            .collect()
    }

    /// Exact draws from the partial posterior `[theta | y_{1:n0}]` when the
    /// model can produce them without MCMC; `None` otherwise.
    fn exact_partial_posterior_sample(
        &self,
        _n0: usize,
        _count: usize,
        _rng: &mut dyn RngCore,
    ) -> Option<Vec<DVector<f64>>> {
        None
    }
}

/// Log prior density in the unconstrained space: model-space prior at the
/// mapped point plus the inverse-transform Jacobian.
pub fn log_prior_unconstrained(model: &dyn Model, u: &DVector<f64>) -> f64 {
    let theta = model.transform().to_model(u);
    let lp = model.log_prior(&theta);
    if lp == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    lp + model.transform().log_jacobian_inv(u)
}
