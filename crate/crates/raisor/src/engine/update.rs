//! Recursive weight updates and the geometric candidate ladder.

use crate::error::{Error, Result};
use crate::models::Model;
use crate::sampling::{normalize, ress, ress_of_probs, support_count, RessEstimate, WeightedSample};

use super::{anneal, replenish, EngineConfig, EngineCtx, EventKind};

/// Multiply the weights by the conditional likelihood of observations
/// `(prefix, to]`: `log w_m += log [y_{prefix+1:to} | theta_m, y_{1:prefix}]`.
/// Particle values are untouched. A zero-length update is the identity.
///
/// Errors with [`Error::DegenerateWeights`] when the updated weights are
/// unnormalizable or fewer than two particles retain mass; the weights are
/// left in their updated state so the caller can decide how to recover.
pub fn recursive_update(
    sample: &mut WeightedSample,
    model: &dyn Model,
    to: usize,
) -> Result<RessEstimate> {
    let from = sample.prefix_len();
    if to < from || to > model.n_obs() {
        return Err(Error::InvalidArgument(format!(
            "cannot update from prefix {from} to {to} with n = {}",
            model.n_obs()
        )));
    }
    if to == from {
        return ress(sample);
    }
    let thetas = super::to_model_space(model, sample);
    let incr = model.batch_loglik_block(&thetas, from, to)?;
    apply_increment(sample, &incr, 1.0, true);
    sample.advance_prefix(to);
    let probs = normalize(sample.log_weights())?;
    if support_count(&probs) < 2 {
        return Err(Error::DegenerateWeights(format!(
            "fewer than two particles carry mass after updating to {to}"
        )));
    }
    ress(sample)
}

pub(crate) fn apply_increment(
    sample: &mut WeightedSample,
    incr: &[f64],
    scale: f64,
    update_cum: bool,
) {
    for (w, &d) in sample.log_weights_mut().iter_mut().zip(incr.iter()) {
        *w += scale * d;
    }
    if update_cum {
        for (c, &d) in sample.cum_loglik_mut().iter_mut().zip(incr.iter()) {
            *c += d;
        }
    }
}

/// RESS of a hypothetical weight vector; zero when degenerate.
pub(crate) fn ress_of_log_weights(log_weights: &[f64]) -> f64 {
    match normalize(log_weights) {
        Ok(probs) => {
            if support_count(&probs) < 2 {
                0.0
            } else {
                ress_of_probs(&probs)
            }
        }
        Err(_) => 0.0,
    }
}

/// Candidate next prefixes: up to `ladder_size + 1` values geometrically
/// spaced in batch size from `n_current + 1` to
/// `min(ceil(n_current / alpha), n_total)`, strictly increasing.
pub fn plan_batches(n_current: usize, n_total: usize, config: &EngineConfig) -> Vec<usize> {
    if n_current >= n_total {
        return Vec::new();
    }
    let unclamped = (n_current as f64 / config.alpha).ceil() as usize;
    let max_next = unclamped.max(n_current + 1).min(n_total);
    let b_max = (max_next - n_current) as f64;
    let rungs = config.ladder_size;
    let mut out = Vec::with_capacity(rungs + 1);
    for i in 0..=rungs {
        let b = b_max.powf(i as f64 / rungs as f64).ceil() as usize;
        let cand = n_current + b.min(max_next - n_current);
        if out.last() != Some(&cand) {
            out.push(cand);
        }
    }
    out
}

/// One engine round over the candidate ladder. Increments are evaluated in a
/// single ascending sweep so each observation's conditional is computed once
/// per particle regardless of which candidate is committed.
pub(crate) fn advance_with_ctx(
    sample: &mut WeightedSample,
    model: &dyn Model,
    config: &EngineConfig,
    ctx: &mut EngineCtx,
) -> Result<()> {
    let n_cur = sample.prefix_len();
    let candidates = plan_batches(n_cur, model.n_obs(), config);
    if candidates.is_empty() {
        return Ok(());
    }
    let m = sample.len();
    let thetas = super::to_model_space(model, sample);
    let base_lw = sample.log_weights().to_vec();

    let mut running = vec![0.0f64; m];
    let mut cumulative: Vec<Vec<f64>> = Vec::with_capacity(candidates.len());
    let mut ress_at: Vec<f64> = Vec::with_capacity(candidates.len());
    let mut scratch = vec![0.0f64; m];
    let mut prev = n_cur;
    for &cand in &candidates {
        let incr = model.batch_loglik_block(&thetas, prev, cand)?;
        ctx.evals += (m * (cand - prev)) as u64;
        for i in 0..m {
            running[i] += incr[i];
            scratch[i] = base_lw[i] + running[i];
        }
        cumulative.push(running.clone());
        ress_at.push(ress_of_log_weights(&scratch));
        prev = cand;
    }

    let chosen = (0..candidates.len())
        .rev()
        .find(|&j| ress_at[j] >= config.min_threshold);

    match chosen {
        Some(j) => {
            apply_increment(sample, &cumulative[j], 1.0, true);
            sample.advance_prefix(candidates[j]);
            ctx.record(candidates[j], ress_at[j], EventKind::Update);
            if ress_at[j] <= config.replenish_threshold {
                let (_, after) = replenish::replenish_with_ctx(sample, model, config, ctx, None)?;
                ctx.record(sample.prefix_len(), after.ress, EventKind::Replenish);
            }
        }
        None => {
            // Every candidate dips below r_min: bridge to the best one.
            let best = (0..candidates.len())
                .max_by(|&a, &b| ress_at[a].partial_cmp(&ress_at[b]).unwrap())
                .expect("ladder nonempty");
            anneal::anneal_with_ctx(sample, model, config, candidates[best], ctx)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ConjugateNormalModel;
    use approx::assert_relative_eq;
    use nalgebra::DVector;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn toy_model(n: usize, seed: u64) -> ConjugateNormalModel {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..n)
            .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
            .collect();
        ConjugateNormalModel::new(0.0, 1e4, 1.0, data).unwrap()
    }

    fn posterior_particles(
        model: &ConjugateNormalModel,
        n0: usize,
        m: usize,
        seed: u64,
    ) -> Vec<DVector<f64>> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        crate::models::Model::exact_partial_posterior_sample(model, n0, m, &mut rng).unwrap()
    }

    #[test]
    fn zero_length_update_is_identity() {
        let model = toy_model(50, 1);
        let particles = posterior_particles(&model, 10, 64, 2);
        let mut sample = WeightedSample::equal_weight(particles, 10).unwrap();
        let lw_before = sample.log_weights().to_vec();
        let est = recursive_update(&mut sample, &model, 10).unwrap();
        assert_eq!(sample.log_weights(), lw_before.as_slice());
        assert_relative_eq!(est.ress, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn split_updates_match_single_update() {
        let model = toy_model(200, 3);
        let particles = posterior_particles(&model, 50, 128, 4);
        let mut one = WeightedSample::equal_weight(particles.clone(), 50).unwrap();
        recursive_update(&mut one, &model, 200).unwrap();
        let mut two = WeightedSample::equal_weight(particles, 50).unwrap();
        recursive_update(&mut two, &model, 120).unwrap();
        recursive_update(&mut two, &model, 200).unwrap();
        for (a, b) in one.log_weights().iter().zip(two.log_weights().iter()) {
            assert!((a - b).abs() < 1e-10, "batching identity violated: {a} vs {b}");
        }
    }

    #[test]
    fn update_matches_exact_posterior_mean() {
        let model = toy_model(2_000, 5);
        let particles = posterior_particles(&model, 100, 40_000, 6);
        let mut sample = WeightedSample::equal_weight(particles, 100).unwrap();
        recursive_update(&mut sample, &model, 2_000).unwrap();
        let (mu_n, _) = model.exact_posterior(2_000).unwrap();
        let (est, se) =
            crate::sampling::estimate_standard_error(&sample, |t| t[0]).unwrap();
        assert!(
            (est - mu_n).abs() <= 3.0 * se,
            "mean {est} vs exact {mu_n} (se {se})"
        );
    }

    #[test]
    fn ladder_hand_cases() {
        let mut config = EngineConfig::desk_default(0);
        config.alpha = 2.0 / 3.0;
        let cands = plan_batches(100, 10_000, &config);
        assert_eq!(*cands.last().unwrap(), 150);
        assert_eq!(cands[0], 101);
        assert!(cands.windows(2).all(|w| w[0] < w[1]));

        config.alpha = 0.5;
        let cands = plan_batches(1, 10_000, &config);
        assert_eq!(*cands.last().unwrap(), 2);

        // Clamped by the data end.
        let cands = plan_batches(95, 100, &config);
        assert_eq!(*cands.last().unwrap(), 100);
        assert!(cands.iter().all(|&c| c <= 100));
    }

    #[test]
    fn degenerate_update_reported() {
        // One particle at the data mean, the rest absurdly far away.
        let model = toy_model(100, 7);
        let mut particles = vec![DVector::from_vec(vec![1e6]); 16];
        particles[0] = DVector::from_vec(vec![0.0]);
        let mut sample = WeightedSample::equal_weight(particles, 0).unwrap();
        let err = recursive_update(&mut sample, &model, 100).unwrap_err();
        assert!(matches!(err, Error::DegenerateWeights(_)));
    }
}
