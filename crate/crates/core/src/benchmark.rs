//! Semi-analytic Heston reference prices and error metrics.

use std::f64::consts::PI;

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::OptionKind;
use crate::model::ModelParams;

/// (transform size, frequency step) tried in order until parity holds.
const RESOLUTIONS: [(usize, f64); 7] = [
    (1 << 14, 0.25),
    (1 << 14, 0.1),
    (1 << 14, 0.05),
    (1 << 14, 0.02),
    (1 << 16, 0.02),
    (1 << 16, 0.01),
    (1 << 18, 0.01),
];
const DAMPING: f64 = 1.25;
const PARITY_TOLERANCE: f64 = 1e-6;

/// `ln(1 + z)` accurate for small `|z|`.
fn ln_1p(z: Complex64) -> Complex64 {
    if z.norm() < 1e-4 {
        // alternating series, four terms are below 1e-16 relative here
        z - z * z / 2.0 + z * z * z / 3.0 - z * z * z * z / 4.0
    } else {
        (Complex64::new(1.0, 0.0) + z).ln()
    }
}

/// Characteristic function `E[exp(i u ln S_T)]` of the Heston model.
///
/// Uses the formulation whose logarithm stays on the principal branch, with
/// `b - d` rewritten as `-xi^2 (iu + u^2) / (b + d)` so that the `xi -> 0`
/// limit is evaluated without cancellation.
pub fn heston_char_fn(model: &ModelParams, u: Complex64, t: f64) -> Complex64 {
    let i = Complex64::new(0.0, 1.0);
    let xi2 = model.xi * model.xi;
    let iu = i * u;
    let drift = iu * (model.s0.ln() + (model.r - model.q) * t);
    let w = iu + u * u;
    let b = model.kappa - model.rho * model.xi * iu;
    let d = (b * b + xi2 * w).sqrt();
    let b_plus_d = b + d;
    // (b - d) / xi^2
    let bmd_over_xi2 = -w / b_plus_d;
    let g = (b - d) / b_plus_d;
    let e = (-d * t).exp();
    let one = Complex64::new(1.0, 0.0);
    // the log of the ratio, not the difference of logs, keeps the branch
    let log_term = if g.norm() < 1e-4 {
        ln_1p(-g * e) - ln_1p(-g)
    } else {
        ((one - g * e) / (one - g)).ln()
    };
    // log_term / xi^2 via g / xi^2 when xi is tiny
    let log_over_xi2 = if xi2 > 1e-12 {
        log_term / xi2
    } else {
        // ln((1 - g e) / (1 - g)) = g (1 - e) + O(g^2)
        bmd_over_xi2 / b_plus_d * (Complex64::new(1.0, 0.0) - e)
    };
    let a = model.kappa * model.v_inf * (bmd_over_xi2 * t - 2.0 * log_over_xi2);
    let bb = model.v0 * bmd_over_xi2 * (Complex64::new(1.0, 0.0) - e)
        / (Complex64::new(1.0, 0.0) - g * e);
    (drift + a + bb).exp()
}

/// Carr-Madan transform with damping `alpha`; a negative `alpha` below -1
/// returns the put.
fn carr_madan(model: &ModelParams, strike: f64, t: f64, alpha: f64, n: usize, eta: f64) -> f64 {
    let lambda = 2.0 * PI / (n as f64 * eta);
    let b = 0.5 * n as f64 * lambda;
    let k0 = strike.ln();
    let i = Complex64::new(0.0, 1.0);
    let disc = (-model.r * t).exp();

    let mut buf: Vec<Complex64> = (0..n)
        .map(|j| {
            let v = j as f64 * eta;
            let phi = heston_char_fn(model, Complex64::new(v, -(alpha + 1.0)), t);
            let denom = Complex64::new(alpha * alpha + alpha - v * v, (2.0 * alpha + 1.0) * v);
            let psi = disc * phi / denom;
            let simpson = if j == 0 {
                1.0 / 3.0
            } else if j % 2 == 1 {
                4.0 / 3.0
            } else {
                2.0 / 3.0
            };
            (-i * v * (k0 - b)).exp() * psi * eta * simpson
        })
        .collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let centre = n / 2;
    let k = k0 - b + lambda * centre as f64;
    (-alpha * k).exp() / PI * buf[centre].re
}

/// Reference vanilla price by Fourier inversion. Fails if call and put
/// computed independently violate put-call parity by more than `1e-6`.
pub fn fft_price(model: &ModelParams, strike: f64, t: f64, kind: OptionKind) -> Result<f64> {
    model.validate()?;
    if model.phi.is_some() || model.beta != 0.5 {
        return Err(Error::InvalidModel(
            "Fourier reference needs a pure Heston model".into(),
        ));
    }
    if !(t > 0.0 && strike > 0.0) {
        return Err(Error::InvalidConfig(
            "Fourier reference needs T > 0 and K > 0".into(),
        ));
    }
    let forward = model.s0 * (-model.q * t).exp() - strike * (-model.r * t).exp();
    let mut best = f64::INFINITY;
    for (n, eta) in RESOLUTIONS {
        let call = carr_madan(model, strike, t, DAMPING, n, eta);
        let put = carr_madan(model, strike, t, -DAMPING, n, eta);
        let parity_error = (call - put - forward).abs();
        if parity_error <= PARITY_TOLERANCE {
            return Ok(match kind {
                OptionKind::Call => call,
                OptionKind::Put => put,
            });
        }
        if parity_error < best || best.is_nan() {
            best = parity_error;
        }
    }
    Err(Error::Resolution { parity_error: best })
}

/// Percent relative errors of a backward and a forward price.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub theta: f64,
    pub eps_bk: f64,
    pub eps_fw: f64,
    pub gap: f64,
    pub reference_price: f64,
}

pub fn error_report(
    theta: f64,
    price_bk: f64,
    price_fw: f64,
    price_ref: f64,
) -> Result<ErrorReport> {
    if price_ref == 0.0 {
        return Err(Error::ZeroReference);
    }
    let eps_bk = (price_ref - price_bk) / price_ref * 100.0;
    let eps_fw = (price_ref - price_fw) / price_ref * 100.0;
    Ok(ErrorReport {
        theta,
        eps_bk,
        eps_fw,
        gap: eps_bk - eps_fw,
        reference_price: price_ref,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(rho: f64) -> ModelParams {
        ModelParams::heston(0.05, 0.0, 1.5, 0.1, 0.3, rho, 100.0, 0.5)
    }

    #[test]
    fn normalisation_and_martingale() {
        let m = model(0.8);
        let one = heston_char_fn(&m, Complex64::new(0.0, 0.0), 1.0);
        assert!((one - 1.0).norm() < 1e-14);
        let fwd = heston_char_fn(&m, Complex64::new(0.0, -1.0), 1.0);
        assert!((fwd - m.s0 * 0.05f64.exp()).norm() < 1e-10 * m.s0);
    }

    #[test]
    fn deterministic_variance_limit() {
        for (xi, rho) in [(1e-7, 0.0), (1e-9, 0.8)] {
            let mut m = model(rho);
            m.xi = xi;
            let t = 1.3;
            let var = m.v_inf * t + (m.v0 - m.v_inf) * (1.0 - (-m.kappa * t).exp()) / m.kappa;
            for u in [0.3, 1.0, 4.0, 15.0] {
                let u = Complex64::new(u, 0.0);
                let i = Complex64::new(0.0, 1.0);
                let bs = (i * u * (m.s0.ln() + m.r * t) - 0.5 * var * (i * u + u * u)).exp();
                let got = heston_char_fn(&m, u, t);
                assert!((got - bs).norm() < 1e-8, "{xi} {u}: {got} {bs}");
            }
        }
    }

    #[test]
    fn reference_prices() {
        for (rho, expected) in [(0.8, 24.0047), (0.0, 23.7015), (-0.8, 23.4077)] {
            let p = fft_price(&model(rho), 100.0, 1.0, OptionKind::Call).unwrap();
            assert!((p - expected).abs() <= 2e-4, "rho {rho}: {p}");
        }
    }

    #[test]
    fn intrinsic_limit() {
        let m = model(0.0);
        let t = 1e-4;
        let p = fft_price(&m, 50.0, t, OptionKind::Call).unwrap();
        assert!((p - (100.0 - 50.0 * (-0.05 * t).exp())).abs() < 1e-4, "{p}");
    }

    #[test]
    fn calls_decrease_in_strike() {
        let m = model(-0.5);
        let prices: Vec<f64> = [80.0, 90.0, 100.0, 110.0, 120.0]
            .iter()
            .map(|&k| fft_price(&m, k, 1.0, OptionKind::Call).unwrap())
            .collect();
        assert!(prices.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn rejects_local_vol() {
        let m = model(0.0).with_local_vol(std::sync::Arc::new(|_, _| 1.0));
        assert!(fft_price(&m, 100.0, 1.0, OptionKind::Call).is_err());
    }

    #[test]
    fn error_metrics() {
        let r = error_report(0.5, 24.0, 24.0, 24.0).unwrap();
        assert_eq!((r.eps_bk, r.eps_fw, r.gap), (0.0, 0.0, 0.0));
        let r = error_report(0.3, 23.98746, 23.99, 24.0047).unwrap();
        assert!((r.eps_bk - 0.0718).abs() < 5e-5);
        let r = error_report(0.3, 9.0, 11.0, 10.0).unwrap();
        assert!((r.eps_bk - 10.0).abs() < 1e-14 && (r.eps_fw + 10.0).abs() < 1e-14);
        assert_eq!(r.gap, r.eps_bk - r.eps_fw);
        assert!(matches!(
            error_report(0.5, 1.0, 1.0, 0.0),
            Err(Error::ZeroReference)
        ));
    }
}
