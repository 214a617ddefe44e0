//! Scalar kernels shared by the tape and the plain-tensor loss paths.

/// Rates below this (spikes/bin) are floored inside the Poisson NLL so an
/// untrained model cannot produce log(0).
pub const RATE_FLOOR: f64 = 1e-10;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + e^x) without overflow for large |x|.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// ln(k!) via log-gamma.
pub fn ln_factorial(k: u32) -> f64 {
    statrs::function::gamma::ln_gamma(k as f64 + 1.0)
}

/// Per-element Poisson negative log-likelihood, lambda in spikes/bin:
/// lambda - k*ln(lambda) + ln(k!), with lambda floored at `RATE_FLOOR`.
pub fn poisson_nll_term(rate: f64, count: u32) -> f64 {
    let lam = rate.max(RATE_FLOOR);
    lam - count as f64 * lam.ln() + ln_factorial(count)
}

/// d/d(rate) of `poisson_nll_term`; zero in the floored region.
pub fn poisson_nll_grad(rate: f64, count: u32) -> f64 {
    if rate < RATE_FLOOR {
        0.0
    } else {
        1.0 - count as f64 / rate
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_symmetry() {
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
        assert!((sigmoid(3.0) + sigmoid(-3.0) - 1.0).abs() < 1e-12);
        assert!(sigmoid(800.0).is_finite());
        assert!(sigmoid(-800.0).is_finite());
    }

    #[test]
    fn softplus_limits() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((softplus(50.0) - 50.0).abs() < 1e-12);
        assert!(softplus(-50.0) > 0.0);
        assert!(softplus(745.0).is_finite());
    }

    #[test]
    fn ln_factorial_small_values() {
        assert!(ln_factorial(0).abs() < 1e-12);
        assert!(ln_factorial(1).abs() < 1e-12);
        assert!((ln_factorial(2) - 2.0f64.ln()).abs() < 1e-12);
        assert!((ln_factorial(5) - 120.0f64.ln()).abs() < 1e-10);
    }

    #[test]
    fn nll_term_examples() {
        // lambda=1, k=0 -> 1 - 0 + 0
        assert!((poisson_nll_term(1.0, 0) - 1.0).abs() < 1e-12);
        // lambda=2, k=2 -> 2 - 2 ln 2 + ln 2 = 2 - ln 2
        assert!((poisson_nll_term(2.0, 2) - (2.0 - 2.0f64.ln())).abs() < 1e-12);
        assert!((poisson_nll_term(2.0, 2) - 1.3068528194400546).abs() < 1e-12);
    }

    #[test]
    fn nll_floor_keeps_zero_rate_finite() {
        assert!(poisson_nll_term(0.0, 3).is_finite());
        assert_eq!(poisson_nll_grad(0.0, 3), 0.0);
    }
}
