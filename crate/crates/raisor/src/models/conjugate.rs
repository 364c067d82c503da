//! Normal mean model with known observation variance and a normal prior:
//! the closed-form oracle every engine claim is checked against.

use nalgebra::DVector;
use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::transform::Transform;

use super::Model;

const LOG_2PI: f64 = 1.8378770664093453;

/// `y_i | mu ~ Normal(mu, sigma^2)` i.i.d. with `mu ~ Normal(mu0, sigma0^2)`.
#[derive(Debug, Clone)]
pub struct ConjugateNormalModel {
    mu0: f64,
    sigma0_sq: f64,
    sigma_sq: f64,
    data: Vec<f64>,
    transform: Transform,
}

impl ConjugateNormalModel {
    pub fn new(mu0: f64, sigma0_sq: f64, sigma_sq: f64, data: Vec<f64>) -> Result<Self> {
        if sigma0_sq <= 0.0 || sigma_sq <= 0.0 {
            return Err(Error::InvalidArgument(
                "variances must be positive".into(),
            ));
        }
        if data.iter().any(|y| !y.is_finite()) {
            return Err(Error::InvalidArgument("non-finite observation".into()));
        }
        Ok(Self {
            mu0,
            sigma0_sq,
            sigma_sq,
            data,
            transform: Transform::identity(1),
        })
    }

    pub fn mu0(&self) -> f64 {
        self.mu0
    }

    pub fn sigma0_sq(&self) -> f64 {
        self.sigma0_sq
    }

    pub fn sigma_sq(&self) -> f64 {
        self.sigma_sq
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Posterior `(mu_n, sigma_n^2)` after the first `n` observations:
    /// `sigma_n^2 = (sigma0^{-2} + n sigma^{-2})^{-1}`,
    /// `mu_n = sigma_n^2 (sigma0^{-2} mu0 + sigma^{-2} sum y_i)`.
    pub fn exact_posterior(&self, n: usize) -> Result<(f64, f64)> {
        if n > self.data.len() {
            return Err(Error::InvalidArgument(format!(
                "posterior prefix {n} exceeds data length {}",
                self.data.len()
            )));
        }
        let prec = 1.0 / self.sigma0_sq + n as f64 / self.sigma_sq;
        let var = 1.0 / prec;
        let sum: f64 = self.data[..n].iter().sum();
        let mean = var * (self.mu0 / self.sigma0_sq + sum / self.sigma_sq);
        Ok((mean, var))
    }

    /// Mean and sum of squared deviations of `data[from..to]` about that mean.
    fn range_stats(&self, from: usize, to: usize) -> (f64, f64) {
        let slice = &self.data[from..to];
        let b = slice.len() as f64;
        let mean = crate::sampling::neumaier_sum(slice.iter().cloned()) / b;
        let ss = crate::sampling::neumaier_sum(slice.iter().map(|y| (y - mean) * (y - mean)));
        (mean, ss)
    }

    fn check_range(&self, from: usize, to: usize) -> Result<()> {
        if from >= to || to > self.data.len() {
            return Err(Error::InvalidArgument(format!(
                "invalid observation range ({from}, {to}] with n = {}",
                self.data.len()
            )));
        }
        Ok(())
    }
}

impl Model for ConjugateNormalModel {
    fn dim(&self) -> usize {
        1
    }

    fn n_obs(&self) -> usize {
        self.data.len()
    }

    fn transform(&self) -> &Transform {
        &self.transform
    }

    fn prior_sample(&self, count: usize, rng: &mut dyn RngCore) -> Vec<DVector<f64>> {
        let sd = self.sigma0_sq.sqrt();
        (0..count)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                DVector::from_vec(vec![self.mu0 + sd * z])
            })
            .collect()
    }

    fn log_prior(&self, theta: &DVector<f64>) -> f64 {
        let d = theta[0] - self.mu0;
        -0.5 * (LOG_2PI + self.sigma0_sq.ln()) - d * d / (2.0 * self.sigma0_sq)
    }

    fn batch_loglik(&self, theta: &DVector<f64>, from: usize, to: usize) -> Result<f64> {
        self.check_range(from, to)?;
        let (mean, ss) = self.range_stats(from, to);
        let b = (to - from) as f64;
        let dev = mean - theta[0];
        Ok(-0.5 * b * (LOG_2PI + self.sigma_sq.ln())
            - (ss + b * dev * dev) / (2.0 * self.sigma_sq))
    }

    fn batch_loglik_block(
        &self,
        thetas: &[DVector<f64>],
        from: usize,
        to: usize,
    ) -> Result<Vec<f64>> {
        self.check_range(from, to)?;
        // The batch mean and scatter are shared across particles; each
        // particle then costs O(1).
        let (mean, ss) = self.range_stats(from, to);
        let b = (to - from) as f64;
        let base = -0.5 * b * (LOG_2PI + self.sigma_sq.ln());
        let inv2 = 1.0 / (2.0 * self.sigma_sq);
        Ok(thetas
            .iter()
            .map(|t| {
                let dev = mean - t[0];
                base - (ss + b * dev * dev) * inv2
            })
            .collect())
    }

    fn exact_partial_posterior_sample(
        &self,
        n0: usize,
        count: usize,
        rng: &mut dyn RngCore,
    ) -> Option<Vec<DVector<f64>>> {
        let (mean, var) = self.exact_posterior(n0).ok()?;
        let sd = var.sqrt();
        Some(
            (0..count)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    DVector::from_vec(vec![mean + sd * z])
                })
                .collect(),
        )
    }
}
