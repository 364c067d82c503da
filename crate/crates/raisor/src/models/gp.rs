//! Gaussian-process regression with Matérn (nu = 3/2) covariance, nugget,
//! and a nearest-neighbor Vecchia likelihood, plus posterior prediction and
//! synthetic-data generation.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, RngCore};
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::math::{ln_gamma, LOG_2PI};
use crate::models::matern::matern32;
use crate::models::vecchia::{build_vecchia, DistanceMetric, VecchiaStructure};
use crate::sampling::WeightedSample;
use crate::transform::{CoordTransform, Transform};

use super::Model;

/// Prior hyperparameters of the geostatistical model:
/// `beta ~ Normal_p(mu_beta, sigma_beta)`, `sigma^2 ~ IG(alpha1/2, alpha2/2)`,
/// `tau^2 ~ Uniform(0, 1)`, `phi ~ Half-Normal(0, gamma_sq)`.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct GpPriors {
    pub mu_beta: Vec<f64>,
    pub sigma_beta_diag: Vec<f64>,
    pub alpha1: f64,
    pub alpha2: f64,
    pub gamma_sq: f64,
}

impl GpPriors {
    /// Weakly informative defaults for `p` regression coefficients.
    pub fn default_for(p: usize) -> Self {
        Self {
            mu_beta: vec![0.0; p],
            sigma_beta_diag: vec![1e4; p],
            alpha1: 2.0,
            alpha2: 2.0,
            gamma_sq: 1.0,
        }
    }
}

/// Parameter layout in model space: `[beta_1..beta_p, sigma^2, tau^2, phi]`.
#[derive(Debug, Clone, Copy)]
pub struct GpParams<'a> {
    pub beta: &'a [f64],
    pub sigma_sq: f64,
    pub tau_sq: f64,
    pub phi: f64,
}

/// GP regression model over a fixed dataset, evaluated in Vecchia order.
#[derive(Debug, Clone)]
pub struct GpModel {
    coords: Vec<[f64; 2]>,
    x: DMatrix<f64>,
    y: DVector<f64>,
    priors: GpPriors,
    structure: VecchiaStructure,
    metric: DistanceMetric,
    transform: Transform,
    /// Maps Vecchia position -> row of the caller's original data.
    original_rows: Vec<usize>,
}

impl GpModel {
    /// Build the model; `coords`, `x` rows, and `y` are given in the caller's
    /// order and are consumed internally in the Vecchia ordering.
    pub fn new(
        coords: Vec<[f64; 2]>,
        x: DMatrix<f64>,
        y: DVector<f64>,
        priors: GpPriors,
        k_neighbors: usize,
        ordering_seed: u64,
        metric: DistanceMetric,
    ) -> Result<Self> {
        let structure = build_vecchia(&coords, k_neighbors, ordering_seed, metric)?;
        Self::with_structure(coords, x, y, priors, structure, metric)
    }

    /// As [`GpModel::new`] with a caller-chosen ordering.
    pub fn with_ordering(
        coords: Vec<[f64; 2]>,
        x: DMatrix<f64>,
        y: DVector<f64>,
        priors: GpPriors,
        k_neighbors: usize,
        ordering: Vec<usize>,
        metric: DistanceMetric,
    ) -> Result<Self> {
        let structure =
            crate::models::vecchia::build_vecchia_with_ordering(&coords, k_neighbors, ordering, metric)?;
        Self::with_structure(coords, x, y, priors, structure, metric)
    }

    fn with_structure(
        coords: Vec<[f64; 2]>,
        x: DMatrix<f64>,
        y: DVector<f64>,
        priors: GpPriors,
        structure: VecchiaStructure,
        metric: DistanceMetric,
    ) -> Result<Self> {
        let n = coords.len();
        if x.nrows() != n || y.len() != n {
            return Err(Error::InvalidArgument(format!(
                "rows mismatch: {} coords, {} covariate rows, {} observations",
                n,
                x.nrows(),
                y.len()
            )));
        }
        let p = x.ncols();
        if priors.mu_beta.len() != p || priors.sigma_beta_diag.len() != p {
            return Err(Error::InvalidArgument(
                "prior dimensions do not match covariates".into(),
            ));
        }
        if priors.sigma_beta_diag.iter().any(|&v| v <= 0.0)
            || priors.alpha1 <= 0.0
            || priors.alpha2 <= 0.0
            || priors.gamma_sq <= 0.0
        {
            return Err(Error::InvalidArgument(
                "prior scale parameters must be positive".into(),
            ));
        }
        let order = structure.ordering().to_vec();
        let coords_ord: Vec<[f64; 2]> = order.iter().map(|&i| coords[i]).collect();
        let mut x_ord = DMatrix::zeros(n, p);
        let mut y_ord = DVector::zeros(n);
        for (pos, &row) in order.iter().enumerate() {
            for c in 0..p {
                x_ord[(pos, c)] = x[(row, c)];
            }
            y_ord[pos] = y[row];
        }
        let mut coord_transforms = vec![CoordTransform::Identity; p];
        coord_transforms.push(CoordTransform::Log); // sigma^2
        coord_transforms.push(CoordTransform::Logit); // tau^2
        coord_transforms.push(CoordTransform::Log); // phi
        Ok(Self {
            coords: coords_ord,
            x: x_ord,
            y: y_ord,
            priors,
            structure,
            metric,
            transform: Transform::new(coord_transforms),
            original_rows: order,
        })
    }

    pub fn n_covariates(&self) -> usize {
        self.x.ncols()
    }

    pub fn priors(&self) -> &GpPriors {
        &self.priors
    }

    pub fn structure(&self) -> &VecchiaStructure {
        &self.structure
    }

    pub fn metric(&self) -> DistanceMetric {
        self.metric
    }

    /// Data in Vecchia order.
    pub fn ordered_data(&self) -> (&[[f64; 2]], &DMatrix<f64>, &DVector<f64>) {
        (&self.coords, &self.x, &self.y)
    }

    pub fn original_rows(&self) -> &[usize] {
        &self.original_rows
    }

    /// Split a model-space parameter vector into named pieces.
    pub fn unpack<'a>(&self, theta: &'a DVector<f64>) -> Result<GpParams<'a>> {
        let p = self.x.ncols();
        if theta.len() != p + 3 {
            return Err(Error::InvalidArgument(format!(
                "parameter vector has {} entries, expected {}",
                theta.len(),
                p + 3
            )));
        }
        Ok(GpParams {
            beta: &theta.as_slice()[..p],
            sigma_sq: theta[p],
            tau_sq: theta[p + 1],
            phi: theta[p + 2],
        })
    }

    fn residual_prefix(&self, beta: &[f64], upto: usize) -> DVector<f64> {
        let p = self.x.ncols();
        let mut r = DVector::zeros(upto);
        for i in 0..upto {
            let mut fit = 0.0;
            for c in 0..p {
                fit += self.x[(i, c)] * beta[c];
            }
            r[i] = self.y[i] - fit;
        }
        r
    }

    /// Per-observation Vecchia conditional log-densities over `(from, to]`,
    /// summed with compensation. The factor rows are built on the fly.
    fn conditional_sum(&self, params: &GpParams, from: usize, to: usize) -> Result<f64> {
        let r = self.residual_prefix(params.beta, to);
        let mut terms = Vec::with_capacity(to - from);
        for i in from..to {
            let row = self.structure.factor_row(i, params.tau_sq, params.phi)?;
            let mut e = r[i];
            for (c, &j) in row
                .coeffs
                .iter()
                .zip(self.structure.neighbor_sets()[i].iter())
            {
                e -= c * r[j];
            }
            let v = params.sigma_sq * row.cond_var;
            terms.push(-0.5 * (LOG_2PI + v.ln()) - e * e / (2.0 * v));
        }
        Ok(crate::sampling::neumaier_sum(terms))
    }
}

impl Model for GpModel {
    fn dim(&self) -> usize {
        self.x.ncols() + 3
    }

    fn n_obs(&self) -> usize {
        self.y.len()
    }

    fn transform(&self) -> &Transform {
        &self.transform
    }

    fn prior_sample(&self, count: usize, rng: &mut dyn RngCore) -> Vec<DVector<f64>> {
        let p = self.x.ncols();
        let gamma = Gamma::new(self.priors.alpha1 / 2.0, 2.0 / self.priors.alpha2)
            .expect("valid inverse-gamma parameters");
        (0..count)
            .map(|_| {
                let mut theta = DVector::zeros(p + 3);
                for c in 0..p {
                    let z: f64 = StandardNormal.sample(rng);
                    theta[c] = self.priors.mu_beta[c] + self.priors.sigma_beta_diag[c].sqrt() * z;
                }
                theta[p] = 1.0 / gamma.sample(rng);
                theta[p + 1] = loop {
                    let u: f64 = rng.random();
                    if u > 0.0 && u < 1.0 {
                        break u;
                    }
                };
                theta[p + 2] = loop {
                    let z: f64 = StandardNormal.sample(rng);
                    let v = self.priors.gamma_sq.sqrt() * z.abs();
                    if v > 0.0 {
                        break v;
                    }
                };
                theta
            })
            .collect()
    }

    fn log_prior(&self, theta: &DVector<f64>) -> f64 {
        let params = match self.unpack(theta) {
            Ok(p) => p,
            Err(_) => return f64::NEG_INFINITY,
        };
        if params.sigma_sq <= 0.0
            || params.phi <= 0.0
            || params.tau_sq <= 0.0
            || params.tau_sq >= 1.0
        {
            return f64::NEG_INFINITY;
        }
        let mut lp = 0.0;
        for (c, &b) in params.beta.iter().enumerate() {
            let var = self.priors.sigma_beta_diag[c];
            let d = b - self.priors.mu_beta[c];
            lp += -0.5 * (LOG_2PI + var.ln()) - d * d / (2.0 * var);
        }
        // Inverse-gamma with shape alpha1/2 and rate alpha2/2.
        let a = self.priors.alpha1 / 2.0;
        let b = self.priors.alpha2 / 2.0;
        lp += a * b.ln() - ln_gamma(a) - (a + 1.0) * params.sigma_sq.ln() - b / params.sigma_sq;
        // Uniform(0,1) contributes zero inside the support.
        lp += 2.0f64.ln()
            - 0.5 * (LOG_2PI + self.priors.gamma_sq.ln())
            - params.phi * params.phi / (2.0 * self.priors.gamma_sq);
        lp
    }

    fn batch_loglik(&self, theta: &DVector<f64>, from: usize, to: usize) -> Result<f64> {
        if from >= to || to > self.n_obs() {
            return Err(Error::InvalidArgument(format!(
                "invalid observation range ({from}, {to}] with n = {}",
                self.n_obs()
            )));
        }
        let params = self.unpack(theta)?;
        if !(params.sigma_sq.is_finite() && params.sigma_sq > 0.0)
            || !(params.phi.is_finite() && params.phi > 0.0)
            || !(params.tau_sq > 0.0 && params.tau_sq < 1.0)
            || params.beta.iter().any(|b| !b.is_finite())
        {
            return Ok(f64::NEG_INFINITY);
        }
        self.conditional_sum(&params, from, to)
    }

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
}

/// Posterior predictive mean and standard deviation at one location.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct PredictionSummary {
    pub mean: f64,
    pub sd: f64,
}

impl GpModel {
    /// Weighted posterior predictive at each grid point from `k` nearest
    /// observed neighbors; `grid_x` carries the covariates of the grid rows.
    /// The sample holds unconstrained particles, as produced by the engine.
    pub fn predict(
        &self,
        sample: &WeightedSample,
        grid: &[[f64; 2]],
        grid_x: &DMatrix<f64>,
    ) -> Result<Vec<PredictionSummary>> {
        if grid.is_empty() {
            return Err(Error::InvalidArgument("empty prediction grid".into()));
        }
        let p = self.x.ncols();
        if grid_x.nrows() != grid.len() || grid_x.ncols() != p {
            return Err(Error::InvalidArgument(
                "grid covariates do not match grid".into(),
            ));
        }
        let probs = sample.normalized_weights()?;
        let thetas: Vec<DVector<f64>> = sample
            .particles()
            .iter()
            .map(|u| self.transform.to_model(u))
            .collect();
        let k = self.structure.k().min(self.n_obs());

        grid.par_iter()
            .enumerate()
            .map(|(g, point)| {
                // k nearest observed neighbors of this grid point.
                let mut dist: Vec<(f64, usize)> = self
                    .coords
                    .iter()
                    .enumerate()
                    .map(|(i, c)| (self.metric.distance(point, c), i))
                    .collect();
                dist.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
                let nbrs: Vec<usize> = dist[..k].iter().map(|&(_, i)| i).collect();

                let mut mean_acc = 0.0;
                let mut second_acc = 0.0;
                for (theta, &w) in thetas.iter().zip(probs.iter()) {
                    if w == 0.0 {
                        continue;
                    }
                    let params = self.unpack(theta)?;
                    let s = 1.0 - params.tau_sq;
                    let m = nbrs.len();
                    let mut c_n = DMatrix::zeros(m, m);
                    for a in 0..m {
                        for b in 0..m {
                            c_n[(a, b)] = if a == b {
                                1.0 + 1e-10
                            } else {
                                s * matern32(
                                    self.metric
                                        .distance(&self.coords[nbrs[a]], &self.coords[nbrs[b]]),
                                    params.phi,
                                )
                            };
                        }
                    }
                    let c = DVector::from_iterator(
                        m,
                        nbrs.iter().map(|&i| {
                            s * matern32(self.metric.distance(point, &self.coords[i]), params.phi)
                        }),
                    );
                    let chol = Cholesky::new(c_n).ok_or_else(|| {
                        Error::Numerical("prediction neighbor matrix not PD".into())
                    })?;
                    let coef = chol.solve(&c);
                    let mut fit = 0.0;
                    for cc in 0..p {
                        fit += grid_x[(g, cc)] * params.beta[cc];
                    }
                    let mut adj = 0.0;
                    for (idx, &i) in nbrs.iter().enumerate() {
                        let mut nfit = 0.0;
                        for cc in 0..p {
                            nfit += self.x[(i, cc)] * params.beta[cc];
                        }
                        adj += coef[idx] * (self.y[i] - nfit);
                    }
                    let pmean = fit + adj;
                    let pvar = (params.sigma_sq * (1.0 - c.dot(&coef))).max(0.0);
                    mean_acc += w * pmean;
                    second_acc += w * (pvar + pmean * pmean);
                }
                let var = (second_acc - mean_acc * mean_acc).max(0.0);
                Ok(PredictionSummary {
                    mean: mean_acc,
                    sd: var.sqrt(),
                })
            })
            .collect()
    }
}

/// Ground-truth parameters for synthetic data.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct GpSimParams {
    pub beta: Vec<f64>,
    pub sigma_sq: f64,
    pub tau_sq: f64,
    pub phi: f64,
}

impl Default for GpSimParams {
    fn default() -> Self {
        Self {
            beta: vec![8.0, 4.0, 16.0],
            sigma_sq: 4.0,
            tau_sq: 0.05,
            phi: 0.05,
        }
    }
}

/// Dense covariance `sigma^2 {(1 - tau^2) R(phi) + tau^2 I}`.
pub fn dense_covariance(
    coords: &[[f64; 2]],
    metric: DistanceMetric,
    sigma_sq: f64,
    tau_sq: f64,
    phi: f64,
) -> DMatrix<f64> {
    let n = coords.len();
    DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            sigma_sq
        } else {
            sigma_sq * (1.0 - tau_sq) * matern32(metric.distance(&coords[i], &coords[j]), phi)
        }
    })
}

/// Simulated dataset: locations, covariates `[1, s1, s2]`, observations.
pub struct GpDataset {
    pub coords: Vec<[f64; 2]>,
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
}

/// Draw locations uniformly on the unit square and observations from the
/// exact dense GP. Cost is cubic in `n`; callers should cap `n`.
pub fn simulate_dense<R: Rng + ?Sized>(
    n: usize,
    params: &GpSimParams,
    rng: &mut R,
) -> Result<GpDataset> {
    let (coords, x) = simulate_design(n, rng)?;
    let sigma = dense_covariance(
        &coords,
        DistanceMetric::Euclidean,
        params.sigma_sq,
        params.tau_sq,
        params.phi,
    );
    let chol = Cholesky::new(sigma)
        .ok_or_else(|| Error::Numerical("dense simulation covariance not PD".into()))?;
    let z = DVector::from_fn(n, |_, _| StandardNormal.sample(rng));
    let y = &x * DVector::from_vec(params.beta.clone()) + chol.l() * z;
    Ok(GpDataset { coords, x, y })
}

/// Same design, but observations drawn from the Vecchia-approximated process;
/// linear in `n` and suitable for large grids.
pub fn simulate_nngp<R: Rng + ?Sized>(
    n: usize,
    params: &GpSimParams,
    k: usize,
    ordering_seed: u64,
    rng: &mut R,
) -> Result<GpDataset> {
    let (coords, x) = simulate_design(n, rng)?;
    let structure = build_vecchia(&coords, k, ordering_seed, DistanceMetric::Euclidean)?;
    let factor = structure.factor(params.tau_sq, params.phi)?;
    let z = DVector::from_fn(n, |_, _| StandardNormal.sample(rng));
    let u = factor.solve_lower(&structure, &z);
    // Undo the ordering so the dataset is in design order.
    let mut noise = DVector::zeros(n);
    for (pos, &row) in structure.ordering().iter().enumerate() {
        noise[row] = u[pos];
    }
    let y = &x * DVector::from_vec(params.beta.clone()) + noise * params.sigma_sq.sqrt();
    Ok(GpDataset { coords, x, y })
}

fn simulate_design<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<(Vec<[f64; 2]>, DMatrix<f64>)> {
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one location".into()));
    }
    let coords: Vec<[f64; 2]> = (0..n).map(|_| [rng.random(), rng.random()]).collect();
    let x = DMatrix::from_fn(n, 3, |i, c| match c {
        0 => 1.0,
        1 => coords[i][0],
        _ => coords[i][1],
    });
    Ok((coords, x))
}

/// Equally spaced prediction grid on the unit square with `[1, s1, s2]`
/// covariates.
pub fn unit_square_grid(side: usize) -> (Vec<[f64; 2]>, DMatrix<f64>) {
    let mut pts = Vec::with_capacity(side * side);
    for i in 0..side {
        for j in 0..side {
            let s1 = (i as f64 + 0.5) / side as f64;
            let s2 = (j as f64 + 0.5) / side as f64;
            pts.push([s1, s2]);
        }
    }
    let x = DMatrix::from_fn(pts.len(), 3, |r, c| match c {
        0 => 1.0,
        1 => pts[r][0],
        _ => pts[r][1],
    });
    (pts, x)
}
