//! Matérn correlation with smoothness 3/2.
//!
//! The production kernel is the closed form `(1 + x) e^{-x}` with
//! `x = sqrt(3) h / phi`. A slow Bessel-integral reference of the general
//! form lives in [`reference`] for validation only.

/// Matérn nu = 3/2 correlation at distance `h` with range `phi`.
#[inline]
pub fn matern32(h: f64, phi: f64) -> f64 {
    if h == 0.0 {
        return 1.0;
    }
    let x = 3.0f64.sqrt() * h / phi;
    (1.0 + x) * (-x).exp()
}

/// General-form Matérn evaluated through a quadrature of the modified Bessel
/// function of the second kind. Orders of magnitude slower than [`matern32`];
/// retained as the independent oracle for the closed form.
pub mod reference {
    /// Gauss-Legendre nodes and weights on [-1, 1] by Newton iteration on the
    /// Legendre recurrence.
    fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        for i in 0..n {
            // Tricomi initial guess.
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            for _ in 0..100 {
                let (mut p0, mut p1) = (1.0f64, x);
                for k in 2..=n {
                    let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                    p0 = p1;
                    p1 = p2;
                }
                let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
                let dx = p1 / dp;
                x -= dx;
                if dx.abs() < 1e-15 {
                    break;
                }
            }
            let (mut p0, mut p1) = (1.0f64, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            nodes[i] = x;
            weights[i] = 2.0 / ((1.0 - x * x) * dp * dp);
        }
        (nodes, weights)
    }

    /// `K_nu(x)` via the integral `int_0^inf e^{-x cosh t} cosh(nu t) dt`,
    /// composite Gauss-Legendre panels up to the point where the integrand
    /// underflows.
    pub fn bessel_k(nu: f64, x: f64) -> f64 {
        assert!(x > 0.0, "bessel_k needs x > 0");
        // e^{-x cosh t} < 1e-320 beyond this t.
        let t_max = ((745.0 / x) + ((745.0 / x) * (745.0 / x) - 1.0).max(0.0).sqrt()).ln();
        let t_max = t_max.max(1.0);
        let panels = 64usize;
        let (nodes, weights) = gauss_legendre(32);
        let h = t_max / panels as f64;
        let mut total = 0.0;
        for p in 0..panels {
            let a = p as f64 * h;
            let mid = a + 0.5 * h;
            let mut acc = 0.0;
            for (z, w) in nodes.iter().zip(weights.iter()) {
                let t = mid + 0.5 * h * z;
                acc += w * (-x * t.cosh()).exp() * (nu * t).cosh();
            }
            total += acc * 0.5 * h;
        }
        total
    }

    /// Log-Gamma via the Lanczos approximation (g = 7, n = 9).
    fn ln_gamma(z: f64) -> f64 {
        const COEFFS: [f64; 9] = [
            0.99999999999980993,
            676.5203681218851,
            -1259.1392167224028,
            771.32342877765313,
            -176.61502916214059,
            12.507343278686905,
            -0.13857109526572012,
            9.9843695780195716e-6,
            1.5056327351493116e-7,
        ];
        if z < 0.5 {
            let pi = std::f64::consts::PI;
            return (pi / (pi * z).sin()).ln() - ln_gamma(1.0 - z);
        }
        let z = z - 1.0;
        let mut a = COEFFS[0];
        let t = z + 7.5;
        for (i, &c) in COEFFS.iter().enumerate().skip(1) {
            a += c / (z + i as f64);
        }
        0.5 * (2.0 * std::f64::consts::PI).ln() + (z + 0.5) * t.ln() - t + a.ln()
    }

    /// General Matérn correlation
    /// `2^{1-nu}/Gamma(nu) (sqrt(2 nu) h / phi)^nu K_nu(sqrt(2 nu) h / phi)`.
    pub fn matern_general(nu: f64, h: f64, phi: f64) -> f64 {
        if h == 0.0 {
            return 1.0;
        }
        let x = (2.0 * nu).sqrt() * h / phi;
        let log_coef = (1.0 - nu) * 2.0f64.ln() - ln_gamma(nu) + nu * x.ln();
        log_coef.exp() * bessel_k(nu, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn closed_form_hand_value() {
        // x = sqrt(3) h / phi = 1 gives (1 + 1) e^{-1}.
        let phi = 0.35;
        let h = phi / 3.0f64.sqrt();
        assert_relative_eq!(matern32(h, phi), 2.0 * (-1.0f64).exp(), epsilon = 1e-14);
        assert_relative_eq!(matern32(h, phi), 0.7357589, epsilon = 1e-7);
    }

    #[test]
    fn zero_distance_is_one() {
        assert_relative_eq!(matern32(0.0, 0.3), 1.0);
    }

    #[test]
    fn closed_form_matches_bessel_reference() {
        // Scan the scaled argument x = sqrt(3) h / phi across [1e-6, 50].
        let phi = 1.0;
        let n = 500;
        for i in 0..n {
            let x = 1e-6 * (50.0f64 / 1e-6).powf(i as f64 / (n - 1) as f64);
            let h = x * phi / 3.0f64.sqrt();
            let closed = matern32(h, phi);
            let general = reference::matern_general(1.5, h, phi);
            assert!(
                (closed - general).abs() < 1e-10,
                "x={x}: closed {closed} vs reference {general}"
            );
        }
    }
}
