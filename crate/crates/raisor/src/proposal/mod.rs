//! Proposal family and adaptation: Gaussian mixtures in unconstrained space,
//! weighted EM under the KL objective, and f-divergence estimators.

mod divergence;
mod em;

pub use divergence::{estimate_divergence, DivergenceKind, DivergenceSpec};
pub use em::{fit_weighted_em, EmOptions};

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampling::log_sum_exp;
use crate::transform::Transform;

const LOG_2PI: f64 = 1.8378770664093453;

/// One mixture component with a cached Cholesky factor of its covariance.
#[derive(Debug, Clone)]
struct Component {
    mean: DVector<f64>,
    chol: DMatrix<f64>,
    log_det: f64,
}

impl Component {
    fn new(mean: DVector<f64>, covariance: &DMatrix<f64>) -> Result<Self> {
        let chol = Cholesky::new(covariance.clone())
            .ok_or_else(|| Error::Numerical("component covariance not positive definite".into()))?;
        let l = chol.l();
        let log_det = 2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>();
        Ok(Self {
            mean,
            chol: l,
            log_det,
        })
    }

    fn log_density(&self, x: &DVector<f64>) -> f64 {
        let d = self.mean.len() as f64;
        let diff = x - &self.mean;
        // Solve L z = diff by forward substitution; |z|^2 is the Mahalanobis term.
        let z = self
            .chol
            .solve_lower_triangular(&diff)
            .expect("cholesky factor is nonsingular");
        -0.5 * (d * LOG_2PI + self.log_det + z.norm_squared())
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let d = self.mean.len();
        let z = DVector::from_fn(d, |_, _| StandardNormal.sample(rng));
        &self.mean + &self.chol * z
    }
}

/// Gaussian mixture in the unconstrained parameterization.
///
/// Samplable, evaluable, and serializable; the backbone of replenishment.
#[derive(Debug, Clone)]
pub struct MixtureProposal {
    weights: Vec<f64>,
    components: Vec<Component>,
    covariances: Vec<DMatrix<f64>>,
    transform: Transform,
}

impl MixtureProposal {
    /// Build a mixture; weights must sum to one within 1e-12 and every
    /// covariance must be symmetric positive definite.
    pub fn new(
        weights: Vec<f64>,
        means: Vec<DVector<f64>>,
        covariances: Vec<DMatrix<f64>>,
        transform: Transform,
    ) -> Result<Self> {
        if weights.is_empty() || weights.len() != means.len() || weights.len() != covariances.len()
        {
            return Err(Error::InvalidArgument(
                "mixture needs matching nonempty weights/means/covariances".into(),
            ));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!(
                "mixture weights sum to {total}, expected 1"
            )));
        }
        if weights.iter().any(|&w| w < 0.0) {
            return Err(Error::InvalidArgument("negative mixture weight".into()));
        }
        let d = means[0].len();
        if transform.dim() != d {
            return Err(Error::InvalidArgument(format!(
                "transform dimension {} does not match mixture dimension {d}",
                transform.dim()
            )));
        }
        let mut components = Vec::with_capacity(weights.len());
        for (mean, cov) in means.into_iter().zip(covariances.iter()) {
            if mean.len() != d || cov.nrows() != d || cov.ncols() != d {
                return Err(Error::InvalidArgument(
                    "inconsistent component dimensions".into(),
                ));
            }
            components.push(Component::new(mean, cov)?);
        }
        Ok(Self {
            weights,
            components,
            covariances,
            transform,
        })
    }

    /// Single-component convenience constructor.
    pub fn single(
        mean: DVector<f64>,
        covariance: DMatrix<f64>,
        transform: Transform,
    ) -> Result<Self> {
        Self::new(vec![1.0], vec![mean], vec![covariance], transform)
    }

    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    pub fn dim(&self) -> usize {
        self.components[0].mean.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> Vec<DVector<f64>> {
        self.components.iter().map(|c| c.mean.clone()).collect()
    }

    pub fn covariances(&self) -> &[DMatrix<f64>] {
        &self.covariances
    }

    pub fn transform(&self) -> &Transform {
        &self.transform
    }

    /// Log mixture density at an unconstrained point. No Jacobian terms;
    /// compose with the transform via [`Self::log_density_model_space`].
    pub fn log_density(&self, x: &DVector<f64>) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::InvalidArgument(format!(
                "dimension mismatch: mixture is {}-dimensional, point is {}",
                self.dim(),
                x.len()
            )));
        }
        let terms: Vec<f64> = self
            .weights
            .iter()
            .zip(self.components.iter())
            .map(|(&w, c)| if w > 0.0 { w.ln() + c.log_density(x) } else { f64::NEG_INFINITY })
            .collect();
        Ok(log_sum_exp(&terms))
    }

    /// Density of the pushforward onto the model space, i.e. the mixture
    /// density at `g(theta)` plus the forward Jacobian term.
    pub fn log_density_model_space(&self, theta: &DVector<f64>) -> Result<f64> {
        let u = self.transform.to_unconstrained(theta)?;
        // log |dg/dtheta| = -log |dg^{-1}/du| at u = g(theta).
        Ok(self.log_density(&u)? - self.transform.log_jacobian_inv(&u))
    }

    /// `count` i.i.d. draws in the unconstrained space.
    pub fn sample<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Vec<DVector<f64>> {
        (0..count).map(|_| self.sample_one(rng)).collect()
    }

    pub fn sample_one<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut idx = self.components.len() - 1;
        for (i, &w) in self.weights.iter().enumerate() {
            acc += w;
            if u <= acc {
                idx = i;
                break;
            }
        }
        self.components[idx].sample(rng)
    }

    /// Return a copy with every covariance scaled by `factor >= 1`; the
    /// replenishment tail-inflation knob.
    pub fn inflate(&self, factor: f64) -> Result<Self> {
        if factor < 1.0 {
            return Err(Error::InvalidArgument(format!(
                "inflation factor {factor} must be >= 1"
            )));
        }
        let covariances: Vec<DMatrix<f64>> =
            self.covariances.iter().map(|c| c * factor).collect();
        Self::new(
            self.weights.clone(),
            self.means(),
            covariances,
            self.transform.clone(),
        )
    }

    /// Serialize to the versioned checkpoint document.
    pub fn to_json(&self) -> Result<String> {
        let doc = MixtureDocument::from(self);
        serde_json::to_string_pretty(&doc).map_err(|e| Error::Serialization(e.to_string()))
    }

    /// Deserialize from the versioned checkpoint document.
    pub fn from_json(text: &str) -> Result<Self> {
        let doc: MixtureDocument =
            serde_json::from_str(text).map_err(|e| Error::Serialization(e.to_string()))?;
        doc.build()
    }
}

/// Versioned on-disk form: weights, means, lower-triangular covariance
/// factors (row-major, including the diagonal), and transform tags.
#[derive(Debug, Serialize, Deserialize)]
struct MixtureDocument {
    version: u32,
    dim: usize,
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    chol_lower: Vec<Vec<f64>>,
    transform: Transform,
}

const MIXTURE_FORMAT_VERSION: u32 = 1;

impl From<&MixtureProposal> for MixtureDocument {
    fn from(p: &MixtureProposal) -> Self {
        let d = p.dim();
        let mut chol_lower = Vec::with_capacity(p.components.len());
        for c in &p.components {
            let mut packed = Vec::with_capacity(d * (d + 1) / 2);
            for i in 0..d {
                for j in 0..=i {
                    packed.push(c.chol[(i, j)]);
                }
            }
            chol_lower.push(packed);
        }
        Self {
            version: MIXTURE_FORMAT_VERSION,
            dim: d,
            weights: p.weights.clone(),
            means: p.components.iter().map(|c| c.mean.iter().cloned().collect()).collect(),
            chol_lower,
            transform: p.transform.clone(),
        }
    }
}

impl MixtureDocument {
    fn build(self) -> Result<MixtureProposal> {
        if self.version != MIXTURE_FORMAT_VERSION {
            return Err(Error::Serialization(format!(
                "unsupported mixture document version {}",
                self.version
            )));
        }
        let d = self.dim;
        let mut covariances = Vec::with_capacity(self.weights.len());
        for packed in &self.chol_lower {
            if packed.len() != d * (d + 1) / 2 {
                return Err(Error::Serialization("malformed covariance factor".into()));
            }
            let mut l = DMatrix::zeros(d, d);
            let mut k = 0;
            for i in 0..d {
                for j in 0..=i {
                    l[(i, j)] = packed[k];
                    k += 1;
                }
            }
            covariances.push(&l * l.transpose());
        }
        let means = self
            .means
            .into_iter()
            .map(|m| {
                if m.len() == d {
                    Ok(DVector::from_vec(m))
                } else {
                    Err(Error::Serialization("malformed mean vector".into()))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        MixtureProposal::new(self.weights, means, covariances, self.transform)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn std_normal_1d() -> MixtureProposal {
        MixtureProposal::single(
            DVector::zeros(1),
            DMatrix::identity(1, 1),
            Transform::identity(1),
        )
        .unwrap()
    }

    #[test]
    fn standard_normal_at_zero() {
        let p = std_normal_1d();
        let ld = p.log_density(&DVector::zeros(1)).unwrap();
        assert_relative_eq!(ld, -0.5 * LOG_2PI, epsilon = 1e-12);
        assert_relative_eq!(ld, -0.9189385, epsilon = 1e-7);
    }

    #[test]
    fn symmetric_mixture_is_even() {
        let p = MixtureProposal::new(
            vec![0.5, 0.5],
            vec![DVector::from_vec(vec![-2.0]), DVector::from_vec(vec![2.0])],
            vec![DMatrix::identity(1, 1), DMatrix::identity(1, 1)],
            Transform::identity(1),
        )
        .unwrap();
        for x in [0.1, 1.0, 3.7] {
            let a = p.log_density(&DVector::from_vec(vec![x])).unwrap();
            let b = p.log_density(&DVector::from_vec(vec![-x])).unwrap();
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn two_component_density_matches_direct_sum() {
        let m1 = DVector::from_vec(vec![0.0, 0.0]);
        let m2 = DVector::from_vec(vec![1.5, -0.5]);
        let c1 = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 2.0]);
        let c2 = DMatrix::from_row_slice(2, 2, &[0.5, -0.1, -0.1, 0.8]);
        let p = MixtureProposal::new(
            vec![0.3, 0.7],
            vec![m1.clone(), m2.clone()],
            vec![c1.clone(), c2.clone()],
            Transform::identity(2),
        )
        .unwrap();
        let x = DVector::from_vec(vec![0.4, 0.2]);

        // Direct-summation oracle with explicit dense inverses.
        let dens = |m: &DVector<f64>, c: &DMatrix<f64>| -> f64 {
            let inv = c.clone().try_inverse().unwrap();
            let det = c.determinant();
            let diff = &x - m;
            ((-0.5 * (diff.transpose() * inv * &diff)[(0, 0)]).exp())
                / ((2.0 * std::f64::consts::PI).powi(1) * det.sqrt())
        };
        let expected = (0.3 * dens(&m1, &c1) + 0.7 * dens(&m2, &c2)).ln();
        assert_relative_eq!(p.log_density(&x).unwrap(), expected, epsilon = 1e-12);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let p = std_normal_1d();
        assert!(p.log_density(&DVector::zeros(2)).is_err());
    }

    #[test]
    fn sampling_is_deterministic_given_seed() {
        let p = std_normal_1d();
        let a = p.sample(32, &mut ChaCha12Rng::seed_from_u64(5));
        let b = p.sample(32, &mut ChaCha12Rng::seed_from_u64(5));
        assert_eq!(a, b);
    }

    #[test]
    fn near_point_mass_mean() {
        let eps = 1e-8;
        let p = MixtureProposal::single(
            DVector::from_vec(vec![3.0]),
            DMatrix::from_element(1, 1, eps),
            Transform::identity(1),
        )
        .unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let draws = p.sample(1000, &mut rng);
        let mean: f64 = draws.iter().map(|d| d[0]).sum::<f64>() / 1000.0;
        let se = (eps / 1000.0f64).sqrt();
        assert!((mean - 3.0).abs() < 3.0 * se.max(1e-9));
    }

    #[test]
    fn component_split_matches_weights() {
        // Components at +/-10 never overlap, so sign identifies the component.
        let p = MixtureProposal::new(
            vec![0.5, 0.5],
            vec![DVector::from_vec(vec![-10.0]), DVector::from_vec(vec![10.0])],
            vec![DMatrix::identity(1, 1), DMatrix::identity(1, 1)],
            Transform::identity(1),
        )
        .unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let draws = p.sample(10_000, &mut rng);
        let frac = draws.iter().filter(|d| d[0] > 0.0).count() as f64 / 10_000.0;
        assert!((0.47..=0.53).contains(&frac), "split {frac}");
    }

    #[test]
    fn component_frequencies_chi_squared() {
        // Three well-separated components; chi^2 test at level 1e-3 with 2 dof
        // (critical value 13.816) over 1e5 draws.
        let weights = vec![0.2, 0.3, 0.5];
        let p = MixtureProposal::new(
            weights.clone(),
            vec![
                DVector::from_vec(vec![-30.0]),
                DVector::from_vec(vec![0.0]),
                DVector::from_vec(vec![30.0]),
            ],
            vec![DMatrix::identity(1, 1); 3],
            Transform::identity(1),
        )
        .unwrap();
        let n = 100_000usize;
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        let mut counts = [0usize; 3];
        for x in p.sample(n, &mut rng) {
            let k = if x[0] < -15.0 {
                0
            } else if x[0] < 15.0 {
                1
            } else {
                2
            };
            counts[k] += 1;
        }
        let chi2: f64 = counts
            .iter()
            .zip(weights.iter())
            .map(|(&c, &w)| {
                let e = w * n as f64;
                (c as f64 - e) * (c as f64 - e) / e
            })
            .sum();
        assert!(chi2 < 13.816, "chi2 {chi2}");
    }

    #[test]
    fn json_round_trip() {
        let p = MixtureProposal::new(
            vec![0.25, 0.75],
            vec![DVector::from_vec(vec![1.0, 2.0]), DVector::from_vec(vec![-1.0, 0.5])],
            vec![
                DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]),
                DMatrix::from_row_slice(2, 2, &[0.4, 0.0, 0.0, 0.9]),
            ],
            Transform::identity(2),
        )
        .unwrap();
        let text = p.to_json().unwrap();
        let q = MixtureProposal::from_json(&text).unwrap();
        let x = DVector::from_vec(vec![0.3, -0.2]);
        assert_relative_eq!(
            p.log_density(&x).unwrap(),
            q.log_density(&x).unwrap(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn model_space_density_integrates_jacobian() {
        use crate::transform::CoordTransform;
        // Log-transformed coordinate: pushforward of N(0,1) through exp is
        // standard lognormal; check against its closed-form density.
        let p = MixtureProposal::single(
            DVector::zeros(1),
            DMatrix::identity(1, 1),
            Transform::new(vec![CoordTransform::Log]),
        )
        .unwrap();
        let theta = DVector::from_vec(vec![2.5]);
        let expected = -(2.5f64.ln().powi(2)) / 2.0 - (2.5f64).ln() - 0.5 * LOG_2PI;
        assert_relative_eq!(
            p.log_density_model_space(&theta).unwrap(),
            expected,
            epsilon = 1e-12
        );
    }
}
