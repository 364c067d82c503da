//! Replenishment: reduce the weighted sample, fit a mixture proposal by
//! weighted EM, redraw the full population, and recompute exact weights.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::models::{log_prior_unconstrained, Model};
use crate::proposal::{fit_weighted_em, MixtureProposal};
use crate::sampling::{ress, weighted_sir, RessEstimate, WeightedSample};

use super::{derive_seed, EngineConfig, EngineCtx};

/// A tempered suffix `(from, to]` raised to the power `t`, used while the
/// rescue path bridges toward a hard target.
#[derive(Debug, Clone, Copy)]
pub(crate) struct TemperBridge {
    pub from: usize,
    pub to: usize,
    pub t: f64,
}

/// Replenish in place: SIR-reduce, fit the mixture in unconstrained space,
/// inflate its covariances, redraw `M` fresh particles, and recompute full
/// weights `log [y_{1:n} | theta] + log [theta] - log q(theta)` with all
/// transform Jacobians. Returns the fitted proposal.
///
/// Component starvation retries with half the components; running out of
/// components surfaces as [`Error::ReplenishFailed`].
pub fn replenish(
    sample: &mut WeightedSample,
    model: &dyn Model,
    config: &EngineConfig,
    rng: &mut ChaCha12Rng,
) -> Result<MixtureProposal> {
    let mut ctx = EngineCtx::new(rng);
    let (proposal, _) = replenish_with_ctx(sample, model, config, &mut ctx, None)?;
    Ok(proposal)
}

pub(crate) fn replenish_with_ctx(
    sample: &mut WeightedSample,
    model: &dyn Model,
    config: &EngineConfig,
    ctx: &mut EngineCtx,
    bridge: Option<TemperBridge>,
) -> Result<(MixtureProposal, RessEstimate)> {
    let proposal = fit_proposal(sample, model, config, ctx.rng)?;
    let est = redraw_with_ctx(sample, model, config, &proposal, ctx, bridge)?;
    Ok((proposal, est))
}

/// Fit the adapted proposal from the current weighted sample without
/// touching the particles.
pub(crate) fn fit_proposal(
    sample: &WeightedSample,
    model: &dyn Model,
    config: &EngineConfig,
    rng: &mut ChaCha12Rng,
) -> Result<MixtureProposal> {
    // Inside anneal internals the support can dip below the configured
    // reduction target; shrink the SIR draw rather than abort.
    let probs = sample.normalized_weights()?;
    let support = crate::sampling::support_count(&probs);
    let target = config.reduce_size.min(sample.len() - 1).min(support.max(1));
    let reduced = weighted_sir(sample, target, rng)?;
    let weights = reduced.normalized_weights()?;

    let mut k = config.mixture_components;
    loop {
        match fit_weighted_em(
            reduced.particles(),
            &weights,
            k,
            model.transform().clone(),
            &config.em,
            rng,
        ) {
            Ok(fit) => return fit.inflate(config.tail_inflation),
            Err(Error::ComponentStarvation(msg)) => {
                if k <= 1 {
                    return Err(Error::ReplenishFailed(format!(
                        "mixture fit starved even with one component: {msg}"
                    )));
                }
                k /= 2;
            }
            Err(e) => return Err(e),
        }
    }
}

/// Redraw the population from a given proposal and recompute exact weights
/// at the sample's current prefix. Public so callers can substitute an
/// external proposal (e.g. an exact posterior) and measure the result.
pub fn redraw_from_proposal(
    sample: &mut WeightedSample,
    model: &dyn Model,
    config: &EngineConfig,
    proposal: &MixtureProposal,
    rng: &mut ChaCha12Rng,
) -> Result<RessEstimate> {
    let mut ctx = EngineCtx::new(rng);
    redraw_with_ctx(sample, model, config, proposal, &mut ctx, None)
}

pub(crate) fn redraw_with_ctx(
    sample: &mut WeightedSample,
    model: &dyn Model,
    config: &EngineConfig,
    proposal: &MixtureProposal,
    ctx: &mut EngineCtx,
    bridge: Option<TemperBridge>,
) -> Result<RessEstimate> {
    let m = config.particles;
    let prefix = sample.prefix_len();
    let stream_base = ctx.rng.random::<u64>();

    // Counter-based per-particle streams keep the draw reproducible at any
    // thread count.
    let particles: Vec<DVector<f64>> = (0..m)
        .into_par_iter()
        .map(|i| {
            let mut r = ChaCha12Rng::seed_from_u64(derive_seed(stream_base, i as u64));
            proposal.sample_one(&mut r)
        })
        .collect();

    let thetas_model: Vec<DVector<f64>> = particles
        .iter()
        .map(|u| model.transform().to_model(u))
        .collect();
    let cum = if prefix > 0 {
        ctx.evals += (m * prefix) as u64;
        model.batch_loglik_block(&thetas_model, 0, prefix)?
    } else {
        vec![0.0; m]
    };

    let extra = match bridge {
        Some(b) if b.t > 0.0 => {
            ctx.evals += (m * (b.to - b.from)) as u64;
            Some((model.batch_loglik_block(&thetas_model, b.from, b.to)?, b.t))
        }
        _ => None,
    };

    let log_weights: Vec<f64> = (0..m)
        .into_par_iter()
        .map(|i| {
            let lq = proposal
                .log_density(&particles[i])
                .expect("dimension fixed");
            let lp = log_prior_unconstrained(model, &particles[i]);
            let tempered = extra
                .as_ref()
                .map(|(inc, t)| t * inc[i])
                .unwrap_or(0.0);
            cum[i] + tempered + lp - lq
        })
        .collect();

    sample.replace(particles, log_weights, cum);
    let est = ress(sample).map_err(|_| {
        Error::ReplenishFailed("fresh weights are degenerate".into())
    })?;
    Ok(est)
}
