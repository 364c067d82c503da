//! End-to-end engine behavior: determinism, trace invariants, replenishment
//! quality, and degradation shape on the closed-form model.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use raisor::engine::{self, EngineConfig, EventKind};
use raisor::models::{ConjugateNormalModel, Model};
use raisor::sampling::{estimate_standard_error, ress};

fn conj_model(n: usize, seed: u64) -> ConjugateNormalModel {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let data: Vec<f64> = (0..n)
        .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
        .collect();
    ConjugateNormalModel::new(0.0, 1e4, 1.0, data).unwrap()
}

fn small_config(seed: u64) -> EngineConfig {
    let mut c = EngineConfig::desk_default(seed);
    c.particles = 4_000;
    c.reduce_size = 400;
    c
}

#[test]
fn conjugate_run_recovers_exact_posterior() {
    let n = 3_000;
    let model = conj_model(n, 11);
    let config = small_config(1);
    let (sample, trace) = engine::run(&model, &config).unwrap();
    assert_eq!(sample.prefix_len(), n);
    assert!(trace.replenish_count() >= 1);

    let (mu_n, var_n) = model.exact_posterior(n).unwrap();
    let (mean, se_mean) = estimate_standard_error(&sample, |t| t[0]).unwrap();
    assert!(
        (mean - mu_n).abs() <= 3.0 * se_mean,
        "posterior mean {mean} vs exact {mu_n} (se {se_mean})"
    );
    let (second, se_second) = estimate_standard_error(&sample, |t| t[0] * t[0]).unwrap();
    let var_est = second - mean * mean;
    // Delta-method scale for the variance of the second moment.
    assert!(
        (var_est - var_n).abs() <= 3.0 * (se_second + 2.0 * mean.abs() * se_mean) + 1e-12,
        "posterior variance {var_est} vs exact {var_n}"
    );
}

#[test]
fn trace_is_deterministic_for_fixed_seed() {
    let model = conj_model(800, 13);
    let config = small_config(7);
    let (sample_a, trace_a) = engine::run(&model, &config).unwrap();
    let (sample_b, trace_b) = engine::run(&model, &config).unwrap();
    assert_eq!(sample_a.log_weights(), sample_b.log_weights());
    assert_eq!(sample_a.particles(), sample_b.particles());
    assert_eq!(trace_a.events.len(), trace_b.events.len());
    for (a, b) in trace_a.events.iter().zip(trace_b.events.iter()) {
        assert_eq!(a.n, b.n);
        assert_eq!(a.kind, b.kind);
        assert_eq!(a.n_evals, b.n_evals);
        assert_eq!(a.ress.to_bits(), b.ress.to_bits());
    }
}

#[test]
fn trace_respects_thresholds_and_monotone_prefix() {
    let model = conj_model(2_000, 17);
    let config = small_config(3);
    let (_, trace) = engine::run(&model, &config).unwrap();
    let mut prev_n = 0;
    for e in &trace.events {
        assert!(e.n >= prev_n, "prefix went backwards");
        prev_n = e.n;
        // Committed updates never sit below r_min; anneal internals excepted.
        if e.kind == EventKind::Update {
            assert!(
                e.ress >= config.min_threshold,
                "update event at RESS {} below r_min",
                e.ress
            );
        }
    }
    // Eval counts are nondecreasing.
    for w in trace.events.windows(2) {
        assert!(w[0].n_evals <= w[1].n_evals);
    }
}

#[test]
fn ress_degrades_between_replenishments() {
    // Along update-only stretches the RESS degrades net of Monte Carlo noise.
    // Pathwise the exact law allows small upward wobbles through its location
    // term, so per-step rises are bounded rather than forbidden.
    let model = conj_model(5_000, 19);
    let config = small_config(5);
    let (_, trace) = engine::run(&model, &config).unwrap();
    let slack = 2.0 / (config.particles as f64).sqrt();
    let mut stretch: Vec<f64> = Vec::new();
    let mut check_stretch = |s: &mut Vec<f64>| {
        if s.len() >= 2 {
            let first = s[0];
            let last = *s.last().unwrap();
            assert!(
                last <= first + slack,
                "stretch ended higher than it began: {first} -> {last}"
            );
            for w in s.windows(2) {
                assert!(
                    w[1] <= w[0] * 1.5 + slack,
                    "per-step RESS jump too large: {} -> {}",
                    w[0],
                    w[1]
                );
            }
        }
        s.clear();
    };
    for e in &trace.events {
        match e.kind {
            EventKind::Update => stretch.push(e.ress),
            _ => check_stretch(&mut stretch),
        }
    }
    check_stretch(&mut stretch);
}

#[test]
fn replenish_events_improve_ress() {
    let model = conj_model(5_000, 23);
    let config = small_config(9);
    let (_, trace) = engine::run(&model, &config).unwrap();
    let slack = 2.0 / (config.particles as f64).sqrt();
    let mut last_update: Option<f64> = None;
    let mut checked = 0;
    for e in &trace.events {
        match e.kind {
            EventKind::Update => last_update = Some(e.ress),
            EventKind::Replenish => {
                if let Some(before) = last_update.take() {
                    assert!(
                        e.ress >= before - slack,
                        "replenish event lowered RESS: {before} -> {}",
                        e.ress
                    );
                    checked += 1;
                }
            }
            _ => last_update = None,
        }
    }
    assert!(checked >= 1, "no replenish events to verify");
}

#[test]
fn forced_anneal_path_terminates_healthy() {
    // Tiny particle count plus a razor-sharp likelihood from a vague prior:
    // the first observation batch already collapses every candidate below
    // r_min, forcing the rescue path.
    let mut rng = ChaCha12Rng::seed_from_u64(29);
    let data: Vec<f64> = (0..400)
        .map(|_| 5.0 + 0.01 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
        .collect();
    let model = ConjugateNormalModel::new(0.0, 1e8, 0.0001, data).unwrap();
    let mut config = small_config(31);
    config.particles = 500;
    config.reduce_size = 50;
    config.init_prefix = 0; // prior start
    let (sample, trace) = engine::run(&model, &config).unwrap();
    assert_eq!(sample.prefix_len(), 400);
    assert!(trace.anneal_step_count() >= 1, "anneal path never engaged");
    let final_ress = ress(&sample).unwrap().ress;
    assert!(
        final_ress >= config.replenish_threshold * 0.9,
        "final RESS {final_ress}"
    );
}

#[test]
fn replenishment_count_scales_logarithmically() {
    // Counts across decades fit c1 + c2 log n with high R^2.
    let mut counts = Vec::new();
    let sizes = [1_000usize, 10_000, 100_000];
    for (i, &n) in sizes.iter().enumerate() {
        let model = conj_model(n, 37 + i as u64);
        let mut config = small_config(41 + i as u64);
        // Near-unit threshold realizes the deterministic exponential schedule.
        config.replenish_threshold = 0.97;
        config.min_threshold = 0.05;
        config.reduce_size = 200;
        let (_, trace) = engine::run(&model, &config).unwrap();
        counts.push(trace.replenish_count() as f64);
    }
    let xs: Vec<f64> = sizes.iter().map(|&n| (n as f64).ln()).collect();
    let xbar = xs.iter().sum::<f64>() / 3.0;
    let ybar = counts.iter().sum::<f64>() / 3.0;
    let sxy: f64 = xs.iter().zip(&counts).map(|(x, y)| (x - xbar) * (y - ybar)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - xbar) * (x - xbar)).sum();
    let syy: f64 = counts.iter().map(|y| (y - ybar) * (y - ybar)).sum();
    let r_sq = sxy * sxy / (sxx * syy);
    assert!(
        r_sq > 0.95,
        "log-linear fit R^2 = {r_sq} with counts {counts:?}"
    );
}

#[test]
fn resume_from_intermediate_sample_matches_prefix() {
    // advance() leaves a usable sample that run_with_initial can continue.
    let model = conj_model(600, 43);
    let config = small_config(11);
    let mut rng = ChaCha12Rng::seed_from_u64(45);
    let particles = model
        .exact_partial_posterior_sample(10, config.particles, &mut rng)
        .unwrap();
    let mut sample = raisor::sampling::WeightedSample::equal_weight(particles, 10).unwrap();
    let mut advance_rng = ChaCha12Rng::seed_from_u64(47);
    while sample.prefix_len() < 600 {
        let events = engine::advance(&mut sample, &model, &config, &mut advance_rng).unwrap();
        assert!(!events.is_empty());
    }
    assert_eq!(sample.prefix_len(), 600);
    let (mu, _) = model.exact_posterior(600).unwrap();
    let (mean, se) = estimate_standard_error(&sample, |t| t[0]).unwrap();
    assert!((mean - mu).abs() <= 4.0 * se, "resumed mean {mean} vs {mu}");
}

#[test]
fn gp_engine_smoke_run() {
    use raisor::models::gp::{simulate_dense, GpSimParams};
    use raisor::models::{DistanceMetric, GpModel, GpPriors};

    let params = GpSimParams::default();
    let mut rng = ChaCha12Rng::seed_from_u64(53);
    let data = simulate_dense(80, &params, &mut rng).unwrap();
    let model = GpModel::new(
        data.coords,
        data.x,
        data.y,
        GpPriors::default_for(3),
        6,
        1,
        DistanceMetric::Euclidean,
    )
    .unwrap();
    let mut config = small_config(55);
    config.particles = 6_000;
    config.reduce_size = 600;
    let init = raisor::mcmc::sample_partial_posterior(&model, 10, config.particles, 2, 57).unwrap();
    let (sample, trace) = engine::run_with_initial(&model, &config, init, 10).unwrap();
    assert_eq!(sample.prefix_len(), 80);
    assert!(trace.final_ress().unwrap() > config.min_threshold);
    // Posterior mean of beta_0 lands within a sane interval of the truth.
    let probs = sample.normalized_weights().unwrap();
    let mut b0 = 0.0;
    for (u, w) in sample.particles().iter().zip(probs.iter()) {
        b0 += model.transform().to_model(u)[0] * w;
    }
    assert!(
        (b0 - 8.0).abs() < 6.0,
        "beta0 posterior mean {b0} wildly off"
    );
}

#[test]
fn weight_cache_consistent_with_model() {
    // After a full run, cum_loglik caches log [y_{1:n} | theta] exactly.
    let model = conj_model(400, 59);
    let mut config = small_config(13);
    config.particles = 300;
    config.reduce_size = 30;
    let (sample, _) = engine::run(&model, &config).unwrap();
    for (i, u) in sample.particles().iter().enumerate().step_by(37) {
        let theta: DVector<f64> = model.transform().to_model(u);
        let ll = model.batch_loglik(&theta, 0, 400).unwrap();
        assert!(
            (sample.cum_loglik()[i] - ll).abs() < 1e-8,
            "cache drift at particle {i}: {} vs {ll}",
            sample.cum_loglik()[i]
        );
    }
}
