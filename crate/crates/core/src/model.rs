//! Model coefficients, jump and dividend specifications, and scheme settings
//! shared by every solver in the crate.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quad::composite_gauss;

/// Local volatility multiplier `phi(S, t)`.
pub type LocalVolFn = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

/// Heston-type LSV coefficients.
///
/// Variance follows `dv = kappa (v_inf - v) dt + xi v^beta dZ` and the spot
/// diffuses with volatility `phi(S, t) sqrt(v)`, correlated with `rho`.
#[derive(Clone, Serialize, Deserialize)]
pub struct ModelParams {
    pub r: f64,
    #[serde(default)]
    pub q: f64,
    pub kappa: f64,
    pub v_inf: f64,
    pub xi: f64,
    pub rho: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    pub s0: f64,
    pub v0: f64,
    /// `None` means `phi = 1` (pure Heston when `beta = 1/2`).
    #[serde(skip)]
    pub phi: Option<LocalVolFn>,
}

fn default_beta() -> f64 {
    0.5
}

impl fmt::Debug for ModelParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelParams")
            .field("r", &self.r)
            .field("q", &self.q)
            .field("kappa", &self.kappa)
            .field("v_inf", &self.v_inf)
            .field("xi", &self.xi)
            .field("rho", &self.rho)
            .field("beta", &self.beta)
            .field("s0", &self.s0)
            .field("v0", &self.v0)
            .field("phi", &self.phi.as_ref().map(|_| "<fn>"))
            .finish()
    }
}

impl ModelParams {
    /// Pure Heston model (`beta = 1/2`, `phi = 1`).
    #[allow(clippy::too_many_arguments)]
    pub fn heston(
        r: f64,
        q: f64,
        kappa: f64,
        v_inf: f64,
        xi: f64,
        rho: f64,
        s0: f64,
        v0: f64,
    ) -> Self {
        ModelParams {
            r,
            q,
            kappa,
            v_inf,
            xi,
            rho,
            beta: 0.5,
            s0,
            v0,
            phi: None,
        }
    }

    pub fn with_local_vol(mut self, phi: LocalVolFn) -> Self {
        self.phi = Some(phi);
        self
    }

    pub fn local_vol(&self, s: f64, t: f64) -> f64 {
        self.phi.as_ref().map_or(1.0, |phi| phi(s, t))
    }

    pub fn has_time_dependent_coefficients(&self) -> bool {
        self.phi.is_some()
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.r, self.q, self.kappa, self.v_inf, self.xi, self.rho, self.beta, self.s0, self.v0,
        ]
        .iter()
        .all(|x| x.is_finite());
        if !finite {
            return Err(Error::InvalidModel("non-finite coefficient".into()));
        }
        let checks = [
            (self.xi > 0.0, "xi must be positive"),
            (self.kappa >= 0.0, "kappa must be nonnegative"),
            (self.v_inf >= 0.0, "v_inf must be nonnegative"),
            (self.rho.abs() <= 1.0, "rho must lie in [-1, 1]"),
            (self.beta >= 0.0, "beta must be nonnegative"),
            (self.s0 > 0.0, "s0 must be positive"),
            (self.v0 > 0.0, "v0 must be positive"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::InvalidModel(msg.into()));
            }
        }
        Ok(())
    }
}

/// Merton log-normal jumps: `nu(dy) = lambda N(mu_j, sigma_j^2)(dy)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JumpSpec {
    pub lambda: f64,
    pub mu_j: f64,
    pub sigma_j: f64,
    /// Half-width of the jump-size domain in log-space.
    pub truncation: f64,
}

impl JumpSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidJumpSpec(
                "lambda must be finite and nonnegative".into(),
            ));
        }
        if !(self.sigma_j > 0.0 && self.sigma_j.is_finite()) {
            return Err(Error::InvalidJumpSpec("sigma_j must be positive".into()));
        }
        if !(self.truncation > 0.0 && self.truncation.is_finite()) {
            return Err(Error::InvalidJumpSpec("truncation must be positive".into()));
        }
        if !self.mu_j.is_finite() {
            return Err(Error::InvalidJumpSpec("mu_j must be finite".into()));
        }
        Ok(())
    }

    /// Jump-size density `nu(y) / lambda`.
    pub fn density(&self, y: f64) -> f64 {
        let z = (y - self.mu_j) / self.sigma_j;
        (-0.5 * z * z).exp() / (self.sigma_j * (2.0 * std::f64::consts::PI).sqrt())
    }
}

/// Jump compensator `int (e^y - 1) nu(dy)` over `[-truncation, truncation]`.
///
/// The Merton measure has finite activity, so the small-jump indicator of the
/// general Levy drift is absorbed into the integral.
pub fn levy_drift(model: &ModelParams, jumps: &JumpSpec) -> Result<f64> {
    let _ = model;
    jumps.validate()?;
    if jumps.lambda == 0.0 {
        return Ok(0.0);
    }
    let panels = ((2.0 * jumps.truncation / jumps.sigma_j) * 40.0)
        .ceil()
        .max(64.0) as usize;
    let integral = composite_gauss(
        |y| y.exp_m1() * jumps.density(y),
        -jumps.truncation,
        jumps.truncation,
        panels,
    );
    let value = jumps.lambda * integral;
    if !value.is_finite() {
        return Err(Error::InvalidJumpSpec(
            "compensator integral is not finite".into(),
        ));
    }
    Ok(value)
}

/// A cash dividend paid at calendar time `t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DividendEvent {
    pub t: f64,
    pub d: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DividendSchedule {
    pub events: Vec<DividendEvent>,
}

impl DividendSchedule {
    pub fn new(events: Vec<DividendEvent>) -> Self {
        DividendSchedule { events }
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn validate(&self, maturity: f64) -> Result<()> {
        let mut last = 0.0;
        for (k, ev) in self.events.iter().enumerate() {
            if !(ev.t > 0.0 && ev.t < maturity) {
                return Err(Error::InvalidDividends(format!(
                    "event {k}: time {} outside (0, {maturity})",
                    ev.t
                )));
            }
            if k > 0 && ev.t <= last {
                return Err(Error::InvalidDividends(format!(
                    "event {k}: times must be strictly increasing"
                )));
            }
            if !(ev.d >= 0.0 && ev.d.is_finite()) {
                return Err(Error::InvalidDividends(format!(
                    "event {k}: negative amount"
                )));
            }
            last = ev.t;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SchemeKind {
    #[serde(rename = "HV")]
    Hv,
    #[serde(rename = "MCS")]
    Mcs,
    #[serde(rename = "IMPLICIT_EULER")]
    ImplicitEuler,
}

/// Which Kolmogorov equation is being solved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Option values, marching in time-to-maturity.
    Backward,
    /// Discounted densities, marching in calendar time.
    Forward,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchemeConfig {
    pub scheme: SchemeKind,
    pub theta: f64,
    pub n_steps: usize,
    #[serde(default = "default_damping")]
    pub damping_start: usize,
    #[serde(default = "default_damping")]
    pub damping_end: usize,
    pub maturity: f64,
}

fn default_damping() -> usize {
    2
}

/// Outcome of a successful [`validate_config`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConfigCheck {
    /// `theta < 1/3`: unconditional stability is not guaranteed.
    pub stability_warning: bool,
}

pub fn validate_config(cfg: &SchemeConfig) -> Result<ConfigCheck> {
    if !(cfg.theta > 0.0 && cfg.theta <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "theta {} outside (0, 1]",
            cfg.theta
        )));
    }
    if cfg.n_steps == 0 {
        return Err(Error::InvalidConfig("n_steps must be positive".into()));
    }
    if cfg.damping_start + cfg.damping_end > cfg.n_steps {
        return Err(Error::InvalidConfig(format!(
            "damping steps {} + {} exceed n_steps {}",
            cfg.damping_start, cfg.damping_end, cfg.n_steps
        )));
    }
    if !(cfg.maturity >= 0.0 && cfg.maturity.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "maturity {} must be finite and >= 0",
            cfg.maturity
        )));
    }
    Ok(ConfigCheck {
        stability_warning: cfg.theta < 1.0 / 3.0,
    })
}

impl SchemeConfig {
    pub fn dt(&self) -> f64 {
        self.maturity / self.n_steps as f64
    }

    /// True if step `n` (1-based, counted from the start of the induction)
    /// is an implicit-Euler damping step.
    pub fn is_damping_step(&self, n: usize) -> bool {
        self.scheme == SchemeKind::ImplicitEuler
            || n <= self.damping_start
            || n > self.n_steps.saturating_sub(self.damping_end)
    }

    /// Same schedule seen from the opposite end of the time axis.
    pub fn mirrored(&self) -> SchemeConfig {
        SchemeConfig {
            damping_start: self.damping_end,
            damping_end: self.damping_start,
            ..*self
        }
    }
}
