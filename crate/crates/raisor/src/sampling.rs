//! Weighted-sample primitives: log-space weights, self-normalized estimation,
//! relative effective sample size, and weighted SIR reduction.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Binomial, Distribution};

use crate::error::{Error, Result};

/// Normalized weights below this threshold count as unsupported particles.
pub const SUPPORT_FLOOR: f64 = 1e-300;

/// Stable `log(sum(exp(x)))` via max subtraction.
///
/// Returns `-inf` for an empty slice or when every entry is `-inf`.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max.is_infinite() {
        return f64::INFINITY;
    }
    let sum: f64 = values.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Compensated (Neumaier) summation. Keeps partition-independent batch
/// log-likelihood sums reproducible to a few ulps.
pub fn neumaier_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Normalize log weights into probabilities summing to one.
///
/// Invariant to adding a constant to every entry. Errors with
/// [`Error::DegenerateWeights`] when no entry is finite.
pub fn normalize(log_weights: &[f64]) -> Result<Vec<f64>> {
    if log_weights.is_empty() {
        return Err(Error::InvalidArgument("empty weight vector".into()));
    }
    if log_weights.iter().any(|w| w.is_nan()) {
        return Err(Error::DegenerateWeights("NaN log weight".into()));
    }
    let lse = log_sum_exp(log_weights);
    if !lse.is_finite() {
        return Err(Error::DegenerateWeights(
            "all log weights are -inf".into(),
        ));
    }
    let mut probs: Vec<f64> = log_weights.iter().map(|&w| (w - lse).exp()).collect();
    // One deterministic renormalization pass absorbs the residual rounding.
    let total: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= total;
    }
    Ok(probs)
}

/// Number of particles whose normalized weight exceeds [`SUPPORT_FLOOR`].
pub fn support_count(probs: &[f64]) -> usize {
    probs.iter().filter(|&&p| p > SUPPORT_FLOOR).count()
}

/// A particle population with unnormalized log weights and the cached data
/// log-likelihood of each particle over the current observation prefix.
///
/// Particles live in the unconstrained parameterization used by the proposal
/// family; models map back to their native space internally.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct WeightedSample {
    particles: Vec<DVector<f64>>,
    log_weights: Vec<f64>,
    cum_loglik: Vec<f64>,
    prefix_len: usize,
    origin_prefix: usize,
}

impl WeightedSample {
    /// Build a sample from parallel arrays. All three must share one length ≥ 1.
    pub fn new(
        particles: Vec<DVector<f64>>,
        log_weights: Vec<f64>,
        cum_loglik: Vec<f64>,
        prefix_len: usize,
    ) -> Result<Self> {
        if particles.is_empty()
            || particles.len() != log_weights.len()
            || particles.len() != cum_loglik.len()
        {
            return Err(Error::InvalidArgument(format!(
                "mismatched particle arrays: {} particles, {} weights, {} log-likelihoods",
                particles.len(),
                log_weights.len(),
                cum_loglik.len()
            )));
        }
        Ok(Self {
            particles,
            log_weights,
            cum_loglik,
            prefix_len,
            origin_prefix: prefix_len,
        })
    }

    /// Equal-weight sample at a given prefix (fresh draws from an exact source).
    pub fn equal_weight(particles: Vec<DVector<f64>>, prefix_len: usize) -> Result<Self> {
        let m = particles.len();
        Self::new(particles, vec![0.0; m], vec![0.0; m], prefix_len)
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.particles[0].len()
    }

    pub fn particles(&self) -> &[DVector<f64>] {
        &self.particles
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    pub fn cum_loglik(&self) -> &[f64] {
        &self.cum_loglik
    }

    /// Number of observations the weights currently account for.
    pub fn prefix_len(&self) -> usize {
        self.prefix_len
    }

    /// Prefix at which the particles were last drawn (creation or replenishment).
    pub fn origin_prefix(&self) -> usize {
        self.origin_prefix
    }

    /// Self-normalized weights.
    pub fn normalized_weights(&self) -> Result<Vec<f64>> {
        normalize(&self.log_weights)
    }

    pub(crate) fn log_weights_mut(&mut self) -> &mut [f64] {
        &mut self.log_weights
    }

    pub(crate) fn cum_loglik_mut(&mut self) -> &mut [f64] {
        &mut self.cum_loglik
    }

    pub(crate) fn advance_prefix(&mut self, to: usize) {
        debug_assert!(to >= self.prefix_len, "prefix must be nondecreasing");
        self.prefix_len = to;
    }

    /// Replace the population after a replenishment at the current prefix.
    pub(crate) fn replace(
        &mut self,
        particles: Vec<DVector<f64>>,
        log_weights: Vec<f64>,
        cum_loglik: Vec<f64>,
    ) {
        self.particles = particles;
        self.log_weights = log_weights;
        self.cum_loglik = cum_loglik;
        self.origin_prefix = self.prefix_len;
    }
}

/// Relative effective sample size of a weighted sample.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RessEstimate {
    /// Fraction of information retained, in (0, 1].
    pub ress: f64,
    /// Equivalent number of independent draws, `M * ress`.
    pub ess: f64,
    /// Observation prefix the weights target.
    pub n: usize,
    /// Prefix at the last replenishment.
    pub n0: usize,
}

/// Plug-in estimate `(mean w)^2 / (mean w^2)` on normalized weights.
///
/// Equals one iff all weights are equal; invariant to permutation and to
/// rescaling of the unnormalized weights.
pub fn ress(sample: &WeightedSample) -> Result<RessEstimate> {
    let probs = sample.normalized_weights()?;
    let r = ress_of_probs(&probs);
    Ok(RessEstimate {
        ress: r,
        ess: r * probs.len() as f64,
        n: sample.prefix_len,
        n0: sample.origin_prefix,
    })
}

/// RESS of already-normalized weights: `1 / (M * sum p^2)`.
pub fn ress_of_probs(probs: &[f64]) -> f64 {
    let m = probs.len() as f64;
    let sum_sq: f64 = probs.iter().map(|p| p * p).sum();
    if sum_sq <= 0.0 {
        return 0.0;
    }
    1.0 / (m * sum_sq)
}

/// Self-normalized importance-sampling estimate of `E[f(theta)]`.
pub fn self_normalized_estimate<F>(sample: &WeightedSample, f: F) -> Result<DVector<f64>>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let probs = sample.normalized_weights()?;
    let mut acc: Option<DVector<f64>> = None;
    for (theta, &p) in sample.particles.iter().zip(probs.iter()) {
        let val = f(theta) * p;
        match &mut acc {
            Some(a) => *a += val,
            None => acc = Some(val),
        }
    }
    acc.ok_or_else(|| Error::InvalidArgument("empty sample".into()))
}

/// Delta-method Monte Carlo standard error of the self-normalized estimate
/// of a scalar function: `sqrt(sum w^2 (f - est)^2)`.
pub fn estimate_standard_error<F>(sample: &WeightedSample, f: F) -> Result<(f64, f64)>
where
    F: Fn(&DVector<f64>) -> f64,
{
    let probs = sample.normalized_weights()?;
    let est: f64 = sample
        .particles
        .iter()
        .zip(probs.iter())
        .map(|(t, &p)| p * f(t))
        .sum();
    let var: f64 = sample
        .particles
        .iter()
        .zip(probs.iter())
        .map(|(t, &p)| {
            let d = f(t) - est;
            p * p * d * d
        })
        .sum();
    Ok((est, var.sqrt()))
}

/// Failures before the first success with success probability `p`.
fn sample_geometric<R: Rng + ?Sized>(p: f64, rng: &mut R) -> Result<u64> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::Numerical(format!(
            "geometric success probability {p} outside (0, 1]"
        )));
    }
    if p == 1.0 {
        return Ok(0);
    }
    let u: f64 = rng.random();
    // Inverse CDF of P(K = k) = (1-p)^k p on k = 0, 1, ...
    let k = (u.ln() / (1.0 - p).ln()).floor();
    Ok(k.max(0.0) as u64)
}

/// Multinomial counts over `probs` (not necessarily normalized) via
/// sequential binomial conditioning.
fn sample_multinomial<R: Rng + ?Sized>(
    total: u64,
    probs: &[f64],
    rng: &mut R,
) -> Result<Vec<u64>> {
    let mut counts = vec![0u64; probs.len()];
    let mut remaining = total;
    let mut mass: f64 = probs.iter().sum();
    for (i, &p) in probs.iter().enumerate() {
        if remaining == 0 {
            break;
        }
        if i + 1 == probs.len() {
            counts[i] = remaining;
            break;
        }
        let frac = (p / mass).clamp(0.0, 1.0);
        let draw = Binomial::new(remaining, frac)
            .map_err(|e| Error::Numerical(format!("binomial: {e}")))?
            .sample(rng);
        counts[i] = draw;
        remaining -= draw;
        mass -= p;
        if mass <= 0.0 {
            break;
        }
    }
    Ok(counts)
}

/// Sequential weighted sampling without replacement: indices of `n` distinct
/// particles, in draw order, with inclusion law matching drawing one at a
/// time proportional to weight (exponential-keys construction).
fn sample_without_replacement<R: Rng + ?Sized>(
    probs: &[f64],
    n: usize,
    rng: &mut R,
) -> Vec<usize> {
    let mut keyed: Vec<(f64, usize)> = probs
        .iter()
        .enumerate()
        .filter(|(_, &p)| p > SUPPORT_FLOOR)
        .map(|(i, &p)| {
            let u: f64 = rng.random();
            // Smaller -ln(u)/p wins; equivalent to Efraimidis-Spirakis keys.
            (-u.ln() / p, i)
        })
        .collect();
    keyed.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("keys are finite"));
    keyed.into_iter().take(n).map(|(_, i)| i).collect()
}

/// Weighted sampling-importance-resampling: shrink a weighted sample to
/// `target_size` distinct particles while preserving its law.
///
/// Draws without replacement proportional to weight, then augments the kept
/// weights with geometric/multinomial counts that mimic running plain SIR
/// until `target_size` unique values appear. Output weights are normalized.
pub fn weighted_sir<R: Rng + ?Sized>(
    sample: &WeightedSample,
    target_size: usize,
    rng: &mut R,
) -> Result<WeightedSample> {
    let m = sample.len();
    if target_size == 0 || target_size >= m {
        return Err(Error::InvalidArgument(format!(
            "target size {target_size} must be in [1, {})",
            m
        )));
    }
    let probs = sample.normalized_weights()?;
    let available = support_count(&probs);
    if available < target_size {
        return Err(Error::InsufficientSupport {
            requested: target_size,
            available,
        });
    }

    let indices = sample_without_replacement(&probs, target_size, rng);
    let kept_probs: Vec<f64> = indices.iter().map(|&i| probs[i]).collect();

    let mut aug = vec![1.0f64; target_size];
    let mut p = 1.0f64;
    for j in 0..target_size - 1 {
        p -= kept_probs[j];
        // Mass outside the selected prefix stays positive because at least
        // target_size particles carry weight.
        let p_succ = p.max(SUPPORT_FLOOR).min(1.0);
        let k = sample_geometric(p_succ, rng)?;
        if k > 0 {
            let extra = sample_multinomial(k, &kept_probs[..=j], rng)?;
            for (w, e) in aug.iter_mut().zip(extra.iter()) {
                *w += *e as f64;
            }
        }
    }
    let total: f64 = aug.iter().sum();
    let log_weights: Vec<f64> = aug.iter().map(|w| (w / total).ln()).collect();

    let particles: Vec<DVector<f64>> = indices
        .iter()
        .map(|&i| sample.particles[i].clone())
        .collect();
    let cum_loglik: Vec<f64> = indices.iter().map(|&i| sample.cum_loglik[i]).collect();

    let mut out = WeightedSample::new(particles, log_weights, cum_loglik, sample.prefix_len)?;
    out.origin_prefix = sample.origin_prefix;
    Ok(out)
}
