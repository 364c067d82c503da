//! Closed-form oracles for the limiting behavior of the relative effective
//! sample size: the deterministic upper bound, the replenishment budget
//! constant, the limit-law sampler, and finite-n normal-case closed forms.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Deterministic upper bound of the limiting RESS: `{alpha (2 - alpha)}^{d/2}`.
pub fn limit_ress_upper_bound(alpha: f64, d: usize) -> Result<f64> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "alpha {alpha} outside (0, 1]"
        )));
    }
    if d == 0 {
        return Err(Error::InvalidArgument("dimension must be >= 1".into()));
    }
    Ok((alpha * (2.0 - alpha)).powf(d as f64 / 2.0))
}

/// Budget constant `c(r_min, d) = r_min^{-2/d} {1 + sqrt(1 - r_min^{2/d})}`:
/// growing a prefix past `c * n0` observations forces the RESS bound below
/// `r_min`.
pub fn replenish_budget_constant(r_min: f64, d: usize) -> Result<f64> {
    if !(r_min > 0.0 && r_min < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "r_min {r_min} outside (0, 1)"
        )));
    }
    if d == 0 {
        return Err(Error::InvalidArgument("dimension must be >= 1".into()));
    }
    let t = r_min.powf(2.0 / d as f64);
    Ok((1.0 + (1.0 - t).sqrt()) / t)
}

/// RESS between two centered normals whose variances differ by the factor
/// `alpha`; the pure scale-mismatch case. Identical to
/// [`limit_ress_upper_bound`].
pub fn scale_mismatch_ress(alpha: f64, d: usize) -> Result<f64> {
    limit_ress_upper_bound(alpha, d)
}

/// The limiting RESS law: `u1(alpha) * exp(-((1-alpha)/(2-alpha)) z' M z)`
/// with `z ~ Normal_d(0, I)` and `M` the misspecification matrix.
#[derive(Debug, Clone)]
pub struct LimitLaw {
    d: usize,
    alpha: f64,
    m_matrix: DMatrix<f64>,
}

impl LimitLaw {
    pub fn new(alpha: f64, m_matrix: DMatrix<f64>) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "alpha {alpha} outside (0, 1)"
            )));
        }
        let d = m_matrix.nrows();
        if d == 0 || m_matrix.ncols() != d {
            return Err(Error::InvalidArgument("M must be square".into()));
        }
        for i in 0..d {
            for j in 0..d {
                if (m_matrix[(i, j)] - m_matrix[(j, i)]).abs() > 1e-12 {
                    return Err(Error::InvalidArgument(
                        "M must be symmetric within 1e-12".into(),
                    ));
                }
            }
        }
        Ok(Self { d, alpha, m_matrix })
    }

    /// Well-specified case `M = I_d`.
    pub fn well_specified(alpha: f64, d: usize) -> Result<Self> {
        Self::new(alpha, DMatrix::identity(d, d))
    }

    /// Assemble `M = (W^{1/2})' V^{-1} W^{1/2}` from a curvature matrix `V`
    /// and a score covariance `W`, using the symmetric square root of `W`.
    /// Eigenvalues of `W` in `[-1e-10, 0)` are clipped to zero.
    pub fn from_curvature_and_score(v: &DMatrix<f64>, w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let d = v.nrows();
        if v.ncols() != d || w.nrows() != d || w.ncols() != d {
            return Err(Error::InvalidArgument("V and W must be square and conformable".into()));
        }
        let sym = (w + w.transpose()) * 0.5;
        let eig = sym.symmetric_eigen();
        let mut sqrt_vals = DVector::zeros(d);
        for i in 0..d {
            let lambda = eig.eigenvalues[i];
            if lambda < -1e-10 {
                return Err(Error::InvalidArgument(format!(
                    "W has negative eigenvalue {lambda}"
                )));
            }
            sqrt_vals[i] = lambda.max(0.0).sqrt();
        }
        let w_half =
            &eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals) * eig.eigenvectors.transpose();
        let v_inv = v
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Numerical("V is singular".into()))?;
        let m = &w_half * v_inv * &w_half;
        Ok((&m + m.transpose()) * 0.5)
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Law value for an injected standard-normal vector.
    pub fn value_at(&self, z: &DVector<f64>) -> Result<f64> {
        if z.len() != self.d {
            return Err(Error::InvalidArgument("z dimension mismatch".into()));
        }
        let quad = (z.transpose() * &self.m_matrix * z)[(0, 0)];
        let u1 = limit_ress_upper_bound(self.alpha, self.d)?;
        Ok(u1 * (-(1.0 - self.alpha) / (2.0 - self.alpha) * quad).exp())
    }

    /// `count` i.i.d. draws; every value lies in `(0, u1(alpha)]`.
    pub fn sample<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Result<Vec<f64>> {
        let u1 = limit_ress_upper_bound(self.alpha, self.d)?;
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let z = DVector::from_fn(self.d, |_, _| StandardNormal.sample(rng));
            let v = self.value_at(&z)?;
            debug_assert!(v > 0.0 && v <= u1 + 1e-15);
            out.push(v);
        }
        Ok(out)
    }
}

/// Exact finite-n RESS for normal posteriors `N(ybar, V^{-1}/n)` against
/// `N(ybar_prefix, V^{-1}/n0)`:
/// `{n0 (2n - n0) / n^2}^{d/2} exp{-(n n0 / (2n - n0)) diff' V diff}`.
///
/// The score-covariance factor of the z-representation cancels algebraically,
/// so it is not a parameter here.
pub fn normal_posterior_pair_ress(
    n: usize,
    n0: usize,
    ybar_full: &DVector<f64>,
    ybar_prefix: &DVector<f64>,
    v: &DMatrix<f64>,
) -> Result<f64> {
    if n0 == 0 || n0 >= n {
        return Err(Error::InvalidArgument(format!(
            "need 0 < n0 < n, got n0={n0}, n={n}"
        )));
    }
    let d = ybar_full.len();
    if ybar_prefix.len() != d || v.nrows() != d || v.ncols() != d {
        return Err(Error::InvalidArgument("conformability failure".into()));
    }
    let nf = n as f64;
    let n0f = n0 as f64;
    let scale = (n0f * (2.0 * nf - n0f) / (nf * nf)).powf(d as f64 / 2.0);
    let diff = ybar_full - ybar_prefix;
    let quad = (diff.transpose() * v * &diff)[(0, 0)];
    Ok(scale * (-(nf * n0f / (2.0 * nf - n0f)) * quad).exp())
}

/// Exact RESS of a univariate normal target `N(mean1, var1)` against a
/// normal proposal `N(mean0, var0)`. Zero when the chi-squared divergence
/// diverges (`2/var1 <= 1/var0`).
pub fn normal_pair_ress_1d(mean0: f64, var0: f64, mean1: f64, var1: f64) -> Result<f64> {
    if var0 <= 0.0 || var1 <= 0.0 {
        return Err(Error::InvalidArgument("variances must be positive".into()));
    }
    let a = 2.0 / var1 - 1.0 / var0;
    if a <= 0.0 {
        return Ok(0.0);
    }
    let b = 2.0 * mean1 / var1 - mean0 / var0;
    let c = 2.0 * mean1 * mean1 / var1 - mean0 * mean0 / var0;
    // 1 / integral of target^2 / proposal.
    Ok(var1 * a.sqrt() / var0.sqrt() * (0.5 * (c - b * b / a)).exp())
}

/// Two-sample Kolmogorov-Smirnov distance `sup |F_a - F_b|`.
pub fn ks_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut xs = a.to_vec();
    let mut ys = b.to_vec();
    xs.sort_by(|p, q| p.partial_cmp(q).expect("finite values"));
    ys.sort_by(|p, q| p.partial_cmp(q).expect("finite values"));
    let (na, nb) = (xs.len() as f64, ys.len() as f64);
    let mut i = 0usize;
    let mut j = 0usize;
    let mut sup: f64 = 0.0;
    while i < xs.len() && j < ys.len() {
        let v = xs[i].min(ys[j]);
        while i < xs.len() && xs[i] == v {
            i += 1;
        }
        while j < ys.len() && ys[j] == v {
            j += 1;
        }
        sup = sup.max((i as f64 / na - j as f64 / nb).abs());
    }
    sup
}
