//! Scalar special functions needed by the likelihood and its derivatives.

pub use statrs::function::gamma::ln_gamma;

/// Digamma function for positive arguments.
///
/// Small arguments are shifted upward with the recurrence
/// `psi(t) = psi(t + 1) - 1/t` until the asymptotic expansion is accurate.
/// Because the shift terms are subtracted from a common base value, the
/// recurrence `psi(t + 1) - psi(t) = 1/t` holds to machine precision.
pub fn digamma(x: f64) -> f64 {
    assert!(x > 0.0, "digamma requires a positive argument, got {x}");
    let mut shift = 0.0;
    let mut t = x;
    while t < 10.0 {
        shift += 1.0 / t;
        t += 1.0;
    }
    // Asymptotic expansion: ln t - 1/(2t) - sum B_{2k} / (2k t^{2k}).
    let inv = 1.0 / t;
    let inv2 = inv * inv;
    let series = inv2
        * (1.0 / 12.0
            - inv2
                * (1.0 / 120.0 - inv2 * (1.0 / 252.0 - inv2 * (1.0 / 240.0 - inv2 / 132.0))));
    t.ln() - 0.5 * inv - series - shift
}
