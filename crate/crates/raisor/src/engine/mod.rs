//! The orchestrator: recursive batched weight updates over a growing
//! observation prefix, threshold-triggered replenishment through mixture
//! adaptation, a geometric batch ladder, and an annealed rescue path.

mod anneal;
mod replenish;
mod update;

pub use anneal::anneal_rescue;
pub use replenish::{redraw_from_proposal, replenish};
pub use update::{plan_batches, recursive_update};

use std::time::Instant;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::Model;
use crate::proposal::EmOptions;
use crate::sampling::{ress, WeightedSample};

/// Tuning parameters of a run. Defaults mirror the settings used for the
/// applications: `r = 2 r_min = 0.2`, `alpha = 2/3`, 20 in-between batch
/// sizes, a 10-component mixture, and a 5000-point reduction target.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EngineConfig {
    /// Particle count M.
    pub particles: usize,
    /// Replenishment trigger r: replenish whenever the RESS drops to or
    /// below this after an update.
    pub replenish_threshold: f64,
    /// Minimum tolerable RESS r_min; candidates below it are rejected and
    /// the annealed rescue path engages when none qualifies.
    pub min_threshold: f64,
    /// Batch growth rate: one round advances the prefix to at most
    /// `ceil(n / alpha)`.
    pub alpha: f64,
    /// Number of in-between candidate batch sizes (the ladder has B+1 rungs).
    pub ladder_size: usize,
    /// Mixture components for the adapted proposal.
    pub mixture_components: usize,
    /// Weighted-SIR reduction target ahead of the EM fit.
    pub reduce_size: usize,
    /// Observations consumed by the initialization sample (0 = prior start).
    pub init_prefix: usize,
    /// Cap on tempering steps inside the rescue path.
    pub anneal_max_steps: usize,
    /// Covariance inflation applied to the fitted proposal before redrawing.
    pub tail_inflation: f64,
    /// Weighted EM settings.
    pub em: EmOptions,
    /// Master seed; a fixed seed and thread count reproduce the run exactly.
    pub seed: u64,
}

impl EngineConfig {
    /// Full-scale defaults (M = 50000) as used for the large runs.
    pub fn paper_default(seed: u64) -> Self {
        Self {
            particles: 50_000,
            replenish_threshold: 0.2,
            min_threshold: 0.1,
            alpha: 2.0 / 3.0,
            ladder_size: 20,
            mixture_components: 10,
            reduce_size: 5_000,
            init_prefix: 10,
            anneal_max_steps: 60,
            tail_inflation: 1.2,
            em: EmOptions::default(),
            seed,
        }
    }

    /// Desk-scale defaults (M = 20000) that keep `M * r_min >= reduce_size`.
    pub fn desk_default(seed: u64) -> Self {
        Self {
            particles: 20_000,
            reduce_size: 2_000,
            ..Self::paper_default(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.particles < 2 {
            return Err(Error::Config("need at least two particles".into()));
        }
        if !(self.min_threshold > 0.0
            && self.min_threshold < self.replenish_threshold
            && self.replenish_threshold < 1.0)
        {
            return Err(Error::Config(format!(
                "thresholds must satisfy 0 < r_min < r < 1, got r_min={}, r={}",
                self.min_threshold, self.replenish_threshold
            )));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!(
                "alpha {} outside (0, 1)",
                self.alpha
            )));
        }
        if self.reduce_size < 2 {
            return Err(Error::Config("reduction target too small".into()));
        }
        if (self.particles as f64) * self.min_threshold < self.reduce_size as f64 {
            return Err(Error::Config(format!(
                "M * r_min = {} cannot sustain the reduction target {}",
                self.particles as f64 * self.min_threshold,
                self.reduce_size
            )));
        }
        if self.ladder_size == 0 {
            return Err(Error::Config("ladder needs at least one rung".into()));
        }
        if self.mixture_components == 0 {
            return Err(Error::Config("need at least one mixture component".into()));
        }
        if self.anneal_max_steps == 0 {
            return Err(Error::Config("anneal_max_steps must be positive".into()));
        }
        if self.tail_inflation < 1.0 {
            return Err(Error::Config("tail inflation must be >= 1".into()));
        }
        Ok(())
    }
}

/// What happened at one point of the run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Init,
    Update,
    Replenish,
    AnnealStep,
}

impl EventKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EventKind::Init => "init",
            EventKind::Update => "update",
            EventKind::Replenish => "replenish",
            EventKind::AnnealStep => "anneal_step",
        }
    }
}

/// Time-indexed record of sample quality and work.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TraceEvent {
    /// Observation prefix after the event.
    pub n: usize,
    /// Estimated RESS of the sample after the event.
    pub ress: f64,
    pub kind: EventKind,
    /// Wall-clock seconds since the run started.
    pub seconds: f64,
    /// Cumulative per-observation conditional likelihood evaluations.
    pub n_evals: u64,
}

/// The full event sequence of a run.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RessTrace {
    pub events: Vec<TraceEvent>,
}

impl RessTrace {
    pub fn replenish_count(&self) -> usize {
        self.events
            .iter()
            .filter(|e| e.kind == EventKind::Replenish)
            .count()
    }

    pub fn anneal_step_count(&self) -> usize {
        self.events
            .iter()
            .filter(|e| e.kind == EventKind::AnnealStep)
            .count()
    }

    pub fn final_ress(&self) -> Option<f64> {
        self.events.last().map(|e| e.ress)
    }

    pub fn total_evals(&self) -> u64 {
        self.events.last().map(|e| e.n_evals).unwrap_or(0)
    }
}

/// Mutable run context threaded through the engine phases.
pub(crate) struct EngineCtx<'r> {
    pub rng: &'r mut ChaCha12Rng,
    pub evals: u64,
    pub started: Instant,
    pub events: Vec<TraceEvent>,
}

impl<'r> EngineCtx<'r> {
    pub(crate) fn new(rng: &'r mut ChaCha12Rng) -> Self {
        Self {
            rng,
            evals: 0,
            started: Instant::now(),
            events: Vec::new(),
        }
    }

    pub(crate) fn record(&mut self, n: usize, ress: f64, kind: EventKind) {
        self.events.push(TraceEvent {
            n,
            ress,
            kind,
            seconds: self.started.elapsed().as_secs_f64(),
            n_evals: self.evals,
        });
    }
}

/// SplitMix64 stream derivation for counter-based per-particle seeding.
pub(crate) fn derive_seed(base: u64, counter: u64) -> u64 {
    let mut z = base ^ counter.wrapping_mul(0x9e3779b97f4a7c15);
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Convert unconstrained particles to model space once per phase.
pub(crate) fn to_model_space(model: &dyn Model, sample: &WeightedSample) -> Vec<DVector<f64>> {
    sample
        .particles()
        .iter()
        .map(|u| model.transform().to_model(u))
        .collect()
}

/// Fit the model end to end: initialize, then alternate ladder updates,
/// replenishment, and rescue until the full observation sequence is
/// incorporated. Initialization uses the model's exact partial-posterior
/// sampler at `init_prefix` when available, and a prior start otherwise.
pub fn run(model: &dyn Model, config: &EngineConfig) -> Result<(WeightedSample, RessTrace)> {
    config.validate()?;
    let mut init_rng = ChaCha12Rng::seed_from_u64(derive_seed(config.seed, 0x1217));
    let n0 = config.init_prefix.min(model.n_obs());
    let init = if n0 > 0 {
        model.exact_partial_posterior_sample(n0, config.particles, &mut init_rng)
    } else {
        None
    };
    match init {
        Some(particles) => run_with_initial(model, config, particles, n0),
        None => {
            let particles = model.prior_sample(config.particles, &mut init_rng);
            run_with_initial(model, config, particles, 0)
        }
    }
}

/// As [`run`], but with caller-supplied model-space particles targeting the
/// partial posterior at `prefix` (e.g. from a short MCMC run).
pub fn run_with_initial(
    model: &dyn Model,
    config: &EngineConfig,
    particles_model: Vec<DVector<f64>>,
    prefix: usize,
) -> Result<(WeightedSample, RessTrace)> {
    config.validate()?;
    if particles_model.len() != config.particles {
        return Err(Error::Config(format!(
            "initial sample has {} particles, config expects {}",
            particles_model.len(),
            config.particles
        )));
    }
    if prefix > model.n_obs() {
        return Err(Error::InvalidArgument(
            "initial prefix exceeds data length".into(),
        ));
    }
    let unconstrained = particles_model
        .iter()
        .map(|t| model.transform().to_unconstrained(t))
        .collect::<Result<Vec<_>>>()?;

    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(config.seed, 0x5eed));
    let mut ctx = EngineCtx::new(&mut rng);

    let cum = if prefix > 0 {
        ctx.evals += (particles_model.len() * prefix) as u64;
        model.batch_loglik_block(&particles_model, 0, prefix)?
    } else {
        vec![0.0; particles_model.len()]
    };
    let m = unconstrained.len();
    let mut sample = WeightedSample::new(unconstrained, vec![0.0; m], cum, prefix)?;
    ctx.record(prefix, 1.0, EventKind::Init);

    while sample.prefix_len() < model.n_obs() {
        update::advance_with_ctx(&mut sample, model, config, &mut ctx)?;
    }
    let trace = RessTrace { events: ctx.events };
    Ok((sample, trace))
}

/// One round of the main loop: evaluate the candidate ladder, commit the
/// largest candidate whose RESS clears `r_min` (replenishing if it fell to
/// `r` or below), or hand the best candidate to the annealed rescue.
pub fn advance(
    sample: &mut WeightedSample,
    model: &dyn Model,
    config: &EngineConfig,
    rng: &mut ChaCha12Rng,
) -> Result<Vec<TraceEvent>> {
    config.validate()?;
    let mut ctx = EngineCtx::new(rng);
    update::advance_with_ctx(sample, model, config, &mut ctx)?;
    Ok(ctx.events)
}

/// Current RESS convenience wrapper.
pub fn current_ress(sample: &WeightedSample) -> Result<f64> {
    Ok(ress(sample)?.ress)
}
