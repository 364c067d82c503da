//! Annealed rescue: bridge from the current prefix to a target prefix with
//! tempered likelihood increments, replenishing between temperature steps.

use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::models::Model;
use crate::sampling::WeightedSample;

use super::replenish::{replenish_with_ctx, TemperBridge};
use super::update::{apply_increment, ress_of_log_weights};
use super::{EngineConfig, EngineCtx, EventKind};

/// Smallest temperature step forced when bisection stalls; matches the
/// bisection resolution so a sharp likelihood can still take tiny first steps.
const MIN_STEP_FRACTION: f64 = 1.0 / (1u64 << 40) as f64;

/// Bridge the sample from its current prefix to `target_prefix` through
/// tempered weight increments `[y_batch | .]^t` along an adaptive ladder
/// `0 < t_1 < ... < 1`, replenishing after each step, until the untempered
/// target is reached with RESS >= `replenish_threshold`.
///
/// Each step picks its temperature by bisection so the tempered RESS lands
/// in `[r, 1)`; a geometric minimum step guarantees progress. Exceeding
/// `anneal_max_steps` fails with [`Error::AnnealFailed`].
pub fn anneal_rescue(
    sample: &mut WeightedSample,
    model: &dyn Model,
    config: &EngineConfig,
    target_prefix: usize,
    rng: &mut ChaCha12Rng,
) -> Result<Vec<super::TraceEvent>> {
    config.validate()?;
    let mut ctx = EngineCtx::new(rng);
    anneal_with_ctx(sample, model, config, target_prefix, &mut ctx)?;
    Ok(ctx.events)
}

pub(crate) fn anneal_with_ctx(
    sample: &mut WeightedSample,
    model: &dyn Model,
    config: &EngineConfig,
    target_prefix: usize,
    ctx: &mut EngineCtx,
) -> Result<()> {
    let from = sample.prefix_len();
    if target_prefix <= from || target_prefix > model.n_obs() {
        return Err(Error::InvalidArgument(format!(
            "anneal target {target_prefix} must lie in ({from}, {}]",
            model.n_obs()
        )));
    }
    let r = config.replenish_threshold;
    let m = sample.len();

    // Increment of the current particles; refreshed after every replenish.
    let mut thetas = super::to_model_space(model, sample);
    let mut incr = model.batch_loglik_block(&thetas, from, target_prefix)?;
    ctx.evals += (m * (target_prefix - from)) as u64;

    let mut t_prev = 0.0f64;
    let mut merged = false;
    for _step in 0..config.anneal_max_steps {
        if !merged {
            let t = next_temperature(sample.log_weights(), &incr, t_prev, r);
            apply_increment(sample, &incr, t - t_prev, false);
            t_prev = t;
            if t >= 1.0 {
                // The suffix is now untempered: fold it into the cache.
                for (c, &d) in sample.cum_loglik_mut().iter_mut().zip(incr.iter()) {
                    *c += d;
                }
                sample.advance_prefix(target_prefix);
                merged = true;
                let ress_now = ress_of_log_weights(sample.log_weights());
                ctx.record(sample.prefix_len(), ress_now, EventKind::AnnealStep);
                if ress_now >= r {
                    return Ok(());
                }
            } else {
                let tempered_ress = ress_of_log_weights(sample.log_weights());
                ctx.record(sample.prefix_len(), tempered_ress, EventKind::AnnealStep);
            }
        }

        let bridge = if merged {
            None
        } else {
            Some(TemperBridge {
                from,
                to: target_prefix,
                t: t_prev,
            })
        };
        let (_, est) = replenish_with_ctx(sample, model, config, ctx, bridge)?;
        ctx.record(sample.prefix_len(), est.ress, EventKind::Replenish);
        if merged {
            if est.ress >= r {
                return Ok(());
            }
        } else {
            // Fresh particles: rebuild the increment for the next step.
            thetas = super::to_model_space(model, sample);
            incr = model.batch_loglik_block(&thetas, from, target_prefix)?;
            ctx.evals += (m * (target_prefix - from)) as u64;
        }
    }
    Err(Error::AnnealFailed(format!(
        "{} tempering steps exhausted short of prefix {target_prefix}",
        config.anneal_max_steps
    )))
}

/// Largest `t` in `(t_prev, 1]` whose tempered RESS stays at or above the
/// step threshold, found by bisection. The threshold is `r` whenever the
/// current sample can support it; if replenishment left the sample below
/// `r`, the step instead tolerates halving the current RESS so the ladder
/// keeps moving under controlled degradation.
fn next_temperature(log_weights: &[f64], incr: &[f64], t_prev: f64, r: f64) -> f64 {
    let tempered_ress = |t: f64| {
        let lw: Vec<f64> = log_weights
            .iter()
            .zip(incr.iter())
            .map(|(&w, &d)| w + (t - t_prev) * d)
            .collect();
        ress_of_log_weights(&lw)
    };
    let current = ress_of_log_weights(log_weights);
    let threshold = if current >= r {
        r
    } else {
        (0.5 * current).max(1e-6)
    };
    if tempered_ress(1.0) >= threshold {
        return 1.0;
    }
    let mut lo = t_prev;
    let mut hi = 1.0;
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if tempered_ress(mid) >= threshold {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let forced = t_prev + (1.0 - t_prev) * MIN_STEP_FRACTION;
    lo.max(forced).min(1.0)
}
