//! Weighted EM for Gaussian mixtures: the KL-optimal adaptation step.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::sampling::log_sum_exp;
use crate::transform::Transform;

use super::MixtureProposal;

/// Knobs for the weighted EM fit.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EmOptions {
    /// Relative improvement below which iteration stops.
    pub tol: f64,
    /// Hard iteration cap.
    pub max_iter: usize,
    /// Independent k-means++ seeded runs; best weighted log-likelihood wins.
    pub restarts: usize,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 500,
            restarts: 3,
        }
    }
}

/// Fit a K-component Gaussian mixture to weighted points by weighted maximum
/// likelihood (EM). Weights must sum to one; requires at least `K * (d + 1)`
/// points. The weighted log-likelihood is nondecreasing across iterations.
pub fn fit_weighted_em<R: Rng + ?Sized>(
    points: &[DVector<f64>],
    weights: &[f64],
    n_components: usize,
    transform: Transform,
    options: &EmOptions,
    rng: &mut R,
) -> Result<MixtureProposal> {
    let n = points.len();
    if n == 0 || n != weights.len() {
        return Err(Error::InvalidArgument(
            "points and weights must be nonempty and matched".into(),
        ));
    }
    let d = points[0].len();
    if n_components == 0 {
        return Err(Error::InvalidArgument("need at least one component".into()));
    }
    if n < n_components * (d + 1) {
        return Err(Error::ComponentStarvation(format!(
            "{n} points cannot support {n_components} components in dimension {d}"
        )));
    }
    let wsum: f64 = weights.iter().sum();
    if (wsum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "point weights sum to {wsum}, expected 1"
        )));
    }

    // Diagonal ridge keyed to the overall weighted covariance scale.
    let (_, scatter) = weighted_moments(points, weights, None);
    let eps_reg = 1e-8 * scatter.trace() / d as f64;

    let mut best: Option<(f64, FitState)> = None;
    for _ in 0..options.restarts.max(1) {
        let seed = rng.random::<u64>();
        match run_em(points, weights, n_components, eps_reg, options, seed) {
            Ok((loglik, state)) => {
                if best.as_ref().map(|(ll, _)| loglik > *ll).unwrap_or(true) {
                    best = Some((loglik, state));
                }
            }
            Err(Error::ComponentStarvation(_)) if best.is_some() => {}
            Err(e) => return Err(e),
        }
    }
    let (_, state) = best.ok_or_else(|| {
        Error::ComponentStarvation("every restart lost a component".into())
    })?;
    MixtureProposal::new(state.pis, state.means, state.covs, transform)
}

struct FitState {
    pis: Vec<f64>,
    means: Vec<DVector<f64>>,
    covs: Vec<DMatrix<f64>>,
}

fn run_em(
    points: &[DVector<f64>],
    weights: &[f64],
    k: usize,
    eps_reg: f64,
    options: &EmOptions,
    seed: u64,
) -> Result<(f64, FitState)> {
    let n = points.len();
    let d = points[0].len();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);

    let centers = kmeans_pp_seeds(points, weights, k, &mut rng);
    let mut state = init_from_centers(points, weights, &centers, eps_reg)?;

    let mut comps = build_components(&state)?;
    let mut prev_ll = f64::NEG_INFINITY;
    let mut resp = vec![vec![0.0f64; k]; n];

    for _ in 0..options.max_iter {
        // E-step: responsibilities and the weighted log-likelihood.
        let mut loglik = 0.0;
        for (m, x) in points.iter().enumerate() {
            let mut terms = vec![f64::NEG_INFINITY; k];
            for (j, c) in comps.iter().enumerate() {
                if state.pis[j] > 0.0 {
                    terms[j] = state.pis[j].ln() + c.log_density(x);
                }
            }
            let lse = log_sum_exp(&terms);
            if !lse.is_finite() {
                return Err(Error::Numerical(
                    "point has zero density under every component".into(),
                ));
            }
            loglik += weights[m] * lse;
            for j in 0..k {
                resp[m][j] = (terms[j] - lse).exp();
            }
        }
        // The ridge added after each M-step can nudge the objective by a few
        // parts in 1e6; anything beyond that is a real regression.
        debug_assert!(
            loglik >= prev_ll - 1e-5 * (1.0 + prev_ll.abs()),
            "EM log-likelihood decreased: {prev_ll} -> {loglik}"
        );
        let done = (loglik - prev_ll).abs() <= options.tol * (1.0 + loglik.abs());
        prev_ll = loglik;
        if done {
            break;
        }

        // M-step with weighted sufficient statistics.
        for j in 0..k {
            let nk: f64 = (0..n).map(|m| weights[m] * resp[m][j]).sum();
            if nk < 1e-10 {
                return Err(Error::ComponentStarvation(format!(
                    "component {j} retained mass {nk}"
                )));
            }
            let mut mean = DVector::zeros(d);
            for m in 0..n {
                mean += &points[m] * (weights[m] * resp[m][j]);
            }
            mean /= nk;
            let mut cov = DMatrix::zeros(d, d);
            for m in 0..n {
                let diff = &points[m] - &mean;
                cov += (&diff * diff.transpose()) * (weights[m] * resp[m][j]);
            }
            cov /= nk;
            for i in 0..d {
                cov[(i, i)] += eps_reg;
            }
            state.pis[j] = nk;
            state.means[j] = mean;
            state.covs[j] = cov;
        }
        let pi_total: f64 = state.pis.iter().sum();
        for p in &mut state.pis {
            *p /= pi_total;
        }
        comps = build_components(&state)?;
    }
    Ok((prev_ll, state))
}

fn build_components(state: &FitState) -> Result<Vec<super::Component>> {
    state
        .pis
        .iter()
        .zip(state.means.iter().zip(state.covs.iter()))
        .map(|(_, (mean, cov))| super::Component::new(mean.clone(), cov))
        .collect()
}

/// Weighted k-means++ seeding: first center drawn by weight, later centers by
/// weight times squared distance to the nearest chosen center.
fn kmeans_pp_seeds<R: Rng + ?Sized>(
    points: &[DVector<f64>],
    weights: &[f64],
    k: usize,
    rng: &mut R,
) -> Vec<DVector<f64>> {
    let n = points.len();
    let mut centers: Vec<DVector<f64>> = Vec::with_capacity(k);
    centers.push(points[weighted_index(weights, rng)].clone());
    let mut d2: Vec<f64> = points
        .iter()
        .map(|p| (p - &centers[0]).norm_squared())
        .collect();
    while centers.len() < k {
        let scores: Vec<f64> = (0..n).map(|i| weights[i] * d2[i]).collect();
        let total: f64 = scores.iter().sum();
        let idx = if total > 0.0 {
            weighted_index(&scores, rng)
        } else {
            // All remaining points coincide with a center; fall back to weight.
            weighted_index(weights, rng)
        };
        centers.push(points[idx].clone());
        let newest = centers.len() - 1;
        for i in 0..n {
            d2[i] = d2[i].min((&points[i] - &centers[newest]).norm_squared());
        }
    }
    centers
}

fn weighted_index<R: Rng + ?Sized>(scores: &[f64], rng: &mut R) -> usize {
    let total: f64 = scores.iter().sum();
    let u: f64 = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (i, &s) in scores.iter().enumerate() {
        acc += s;
        if u <= acc {
            return i;
        }
    }
    scores.len() - 1
}

/// Hard-assign points to the seed centers and compute per-cluster weighted
/// moments as the initial mixture state.
fn init_from_centers(
    points: &[DVector<f64>],
    weights: &[f64],
    centers: &[DVector<f64>],
    eps_reg: f64,
) -> Result<FitState> {
    let k = centers.len();
    let d = points[0].len();
    let mut assign = vec![0usize; points.len()];
    for (m, p) in points.iter().enumerate() {
        let mut best = (f64::INFINITY, 0usize);
        for (j, c) in centers.iter().enumerate() {
            let dist = (p - c).norm_squared();
            if dist < best.0 {
                best = (dist, j);
            }
        }
        assign[m] = best.1;
    }
    let mut pis = vec![0.0f64; k];
    let mut means = vec![DVector::zeros(d); k];
    let mut covs = vec![DMatrix::zeros(d, d); k];
    for j in 0..k {
        let members: Vec<usize> = (0..points.len()).filter(|&m| assign[m] == j).collect();
        let mass: f64 = members.iter().map(|&m| weights[m]).sum();
        if members.is_empty() || mass <= 0.0 {
            return Err(Error::ComponentStarvation(format!(
                "seed cluster {j} is empty"
            )));
        }
        let mut mean = DVector::zeros(d);
        for &m in &members {
            mean += &points[m] * weights[m];
        }
        mean /= mass;
        let mut cov = DMatrix::zeros(d, d);
        for &m in &members {
            let diff = &points[m] - &mean;
            cov += (&diff * diff.transpose()) * weights[m];
        }
        cov /= mass;
        // Collapsed clusters still get a usable spherical start.
        let floor = eps_reg.max(1e-12);
        for i in 0..d {
            cov[(i, i)] += floor;
        }
        pis[j] = mass;
        means[j] = mean;
        covs[j] = cov;
    }
    let total: f64 = pis.iter().sum();
    for p in &mut pis {
        *p /= total;
    }
    Ok(FitState { pis, means, covs })
}

/// Weighted mean and covariance of a point cloud (weights assumed normalized).
pub(crate) fn weighted_moments(
    points: &[DVector<f64>],
    weights: &[f64],
    mean_override: Option<&DVector<f64>>,
) -> (DVector<f64>, DMatrix<f64>) {
    let d = points[0].len();
    let mean = match mean_override {
        Some(m) => m.clone(),
        None => {
            let mut m = DVector::zeros(d);
            for (p, &w) in points.iter().zip(weights.iter()) {
                m += p * w;
            }
            m
        }
    };
    let mut cov = DMatrix::zeros(d, d);
    for (p, &w) in points.iter().zip(weights.iter()) {
        let diff = p - &mean;
        cov += (&diff * diff.transpose()) * w;
    }
    (mean, cov)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand_distr::{Distribution, StandardNormal};

    fn draw_cluster<R: Rng>(
        center: &[f64],
        sd: f64,
        count: usize,
        rng: &mut R,
    ) -> Vec<DVector<f64>> {
        (0..count)
            .map(|_| {
                DVector::from_iterator(
                    center.len(),
                    center
                        .iter()
                        .map(|&c| c + sd * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)),
                )
            })
            .collect()
    }

    #[test]
    fn single_component_matches_weighted_moments() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let points = draw_cluster(&[1.0, -2.0], 0.7, 400, &mut rng);
        let weights = vec![1.0 / 400.0; 400];
        let fit = fit_weighted_em(
            &points,
            &weights,
            1,
            Transform::identity(2),
            &EmOptions::default(),
            &mut rng,
        )
        .unwrap();
        let (mean, cov) = weighted_moments(&points, &weights, None);
        let fit_mean = &fit.means()[0];
        for i in 0..2 {
            assert_relative_eq!(fit_mean[i], mean[i], epsilon = 1e-8);
            for j in 0..2 {
                assert_relative_eq!(
                    fit.covariances()[0][(i, j)],
                    cov[(i, j)],
                    epsilon = 1e-7,
                    max_relative = 1e-6
                );
            }
        }
    }

    #[test]
    fn recovers_separated_clusters() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let mut points = draw_cluster(&[-4.0], 0.3, 500, &mut rng);
        points.extend(draw_cluster(&[4.0], 0.3, 500, &mut rng));
        let weights = vec![1e-3; 1000];
        let fit = fit_weighted_em(
            &points,
            &weights,
            2,
            Transform::identity(1),
            &EmOptions::default(),
            &mut rng,
        )
        .unwrap();
        let mut centers: Vec<f64> = fit.means().iter().map(|m| m[0]).collect();
        centers.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((centers[0] + 4.0).abs() < 0.1, "left center {}", centers[0]);
        assert!((centers[1] - 4.0).abs() < 0.1, "right center {}", centers[1]);
    }

    #[test]
    fn splitting_a_point_leaves_fit_unchanged() {
        // Duplicate one point with its weight halved; sufficient statistics
        // are identical, so the K=1 closed-form fit cannot move.
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let points = draw_cluster(&[0.5, 0.5], 1.0, 60, &mut rng);
        let weights = vec![1.0 / 60.0; 60];
        let fit_a = fit_weighted_em(
            &points,
            &weights,
            1,
            Transform::identity(2),
            &EmOptions::default(),
            &mut ChaCha12Rng::seed_from_u64(0),
        )
        .unwrap();

        let mut split_points = points.clone();
        split_points.push(points[0].clone());
        let mut split_weights = weights.clone();
        split_weights[0] /= 2.0;
        split_weights.push(split_weights[0]);
        let fit_b = fit_weighted_em(
            &split_points,
            &split_weights,
            1,
            Transform::identity(2),
            &EmOptions::default(),
            &mut ChaCha12Rng::seed_from_u64(0),
        )
        .unwrap();

        for i in 0..2 {
            assert_relative_eq!(fit_a.means()[0][i], fit_b.means()[0][i], epsilon = 1e-9);
            for j in 0..2 {
                assert_relative_eq!(
                    fit_a.covariances()[0][(i, j)],
                    fit_b.covariances()[0][(i, j)],
                    epsilon = 1e-9
                );
            }
        }
    }

    #[test]
    fn starvation_on_too_few_points() {
        let points = vec![DVector::from_vec(vec![0.0, 0.0]); 5];
        let weights = vec![0.2; 5];
        let err = fit_weighted_em(
            &points,
            &weights,
            3,
            Transform::identity(2),
            &EmOptions::default(),
            &mut ChaCha12Rng::seed_from_u64(0),
        )
        .unwrap_err();
        assert!(matches!(err, Error::ComponentStarvation(_)));
    }

    #[test]
    fn fitted_density_integrates_to_one() {
        // Importance check of the normalizer: E_q'[q/q'] = 1 for a wider q'.
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let mut points = draw_cluster(&[-1.0, 0.0], 0.8, 600, &mut rng);
        points.extend(draw_cluster(&[2.0, 1.0], 0.5, 600, &mut rng));
        let weights = vec![1.0 / 1200.0; 1200];
        let fit = fit_weighted_em(
            &points,
            &weights,
            2,
            Transform::identity(2),
            &EmOptions::default(),
            &mut rng,
        )
        .unwrap();
        let wide = fit.inflate(2.0).unwrap();
        let draws = wide.sample(100_000, &mut rng);
        let mut total = 0.0;
        for x in &draws {
            total += (fit.log_density(x).unwrap() - wide.log_density(x).unwrap()).exp();
        }
        let integral = total / draws.len() as f64;
        assert!((integral - 1.0).abs() < 0.01, "integral {integral}");
    }
}
