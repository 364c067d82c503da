//! Chain effective sample size via the initial positive sequence estimator.

/// ESS of a single chain: `n / (2 sum Gamma_m - 1)` where
/// `Gamma_m = rho_{2m} + rho_{2m+1}` are paired autocorrelations, truncated
/// at the first nonpositive pair. A constant chain reports 1.
pub fn geyer_ess(chain: &[f64]) -> f64 {
    let n = chain.len();
    if n < 4 {
        return n.max(1) as f64;
    }
    let nf = n as f64;
    let mean = chain.iter().sum::<f64>() / nf;
    let gamma = |lag: usize| -> f64 {
        (0..n - lag)
            .map(|i| (chain[i] - mean) * (chain[i + lag] - mean))
            .sum::<f64>()
            / nf
    };
    let g0 = gamma(0);
    if g0 <= 1e-300 {
        return 1.0;
    }
    let mut pair_sum = 0.0;
    let mut m = 0usize;
    while 2 * m + 1 < n {
        let pair = gamma(2 * m) + gamma(2 * m + 1);
        if pair <= 0.0 {
            break;
        }
        pair_sum += pair;
        m += 1;
    }
    let iact = (2.0 * pair_sum / g0 - 1.0).max(1.0);
    (nf / iact).clamp(1.0, nf)
}
