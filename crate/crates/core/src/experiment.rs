//! JSON-configured experiments behind the `engine` binary.

use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::benchmark::{error_report, fft_price, ErrorReport};
use crate::dividends::DividendMode;
use crate::error::{Error, Result};
use crate::grid::{build_grid, Grid2D, GridSpec, OptionKind, Payoff};
use crate::induction::{
    backward_price, density_price, forward_density, price_pair, BoundaryMode, Problem,
};
use crate::model::{
    validate_config, Direction, DividendSchedule, JumpSpec, ModelParams, SchemeConfig, SchemeKind,
};
use crate::operators::{assemble, check_m_matrix, identity_minus, BoundaryRows, OperatorSet};
use crate::schemes::{assemble_transition_matrix, probe_scheme, transpose_residual};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptionSpec {
    pub kind: OptionKind,
    pub strike: f64,
    /// Extra strikes priced from one density by the `density` command.
    #[serde(default)]
    pub strikes: Vec<f64>,
}

impl OptionSpec {
    pub fn payoff(&self, strike: f64) -> Payoff {
        Payoff {
            kind: self.kind,
            strike,
        }
    }

    /// `strikes` if given, otherwise the single `strike`.
    pub fn strike_list(&self) -> Vec<f64> {
        if self.strikes.is_empty() {
            vec![self.strike]
        } else {
            self.strikes.clone()
        }
    }
}

fn default_grid() -> GridSpec {
    GridSpec::heston_experiment()
}

/// Contents of a config file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelParams,
    #[serde(default)]
    pub jumps: Option<JumpSpec>,
    #[serde(default)]
    pub dividends: Option<DividendSchedule>,
    pub scheme: SchemeConfig,
    #[serde(default = "default_grid")]
    pub grid: GridSpec,
    pub option: OptionSpec,
    #[serde(default)]
    pub boundary: BoundaryMode,
    #[serde(default)]
    pub dividend_mode: DividendMode,
    /// Scheme parameters visited by `theta_sweep`.
    #[serde(default)]
    pub thetas: Vec<f64>,
    /// Overrides the Fourier reference in `theta_sweep`; needed when the
    /// model has jumps or dividends.
    #[serde(default)]
    pub reference_price: Option<f64>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| {
            Error::InvalidConfig(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        validate_config(&self.scheme)?;
        if let Some(j) = &self.jumps {
            j.validate()?;
        }
        if let Some(d) = &self.dividends {
            d.validate(self.scheme.maturity)?;
        }
        let strikes = self.option.strike_list();
        if let Some(k) = strikes
            .iter()
            .chain(std::iter::once(&self.option.strike))
            .find(|k| !(**k > 0.0 && k.is_finite()))
        {
            return Err(Error::InvalidConfig(format!("strike {k} must be positive")));
        }
        if let Some(t) = self.thetas.iter().find(|t| !(**t > 0.0 && **t <= 1.0)) {
            return Err(Error::InvalidConfig(format!("theta {t} outside (0, 1]")));
        }
        Ok(())
    }

    /// The grid, condensed around `S0` and every strike of the option list.
    pub fn build_grid(&self) -> Result<Grid2D> {
        let mut spec = self.grid.clone();
        if spec.condense_points.is_empty() {
            spec.condense_points = std::iter::once(self.model.s0)
                .chain(self.option.strike_list())
                .chain(std::iter::once(self.option.strike))
                .collect();
        }
        let widest = self
            .option
            .strike_list()
            .into_iter()
            .fold(self.option.strike, f64::max);
        build_grid(&spec, &self.model, widest)
    }

    pub fn problem<'a>(&self, model: &'a ModelParams, grid: &'a Grid2D) -> Problem<'a> {
        let mut p = Problem::new(self.scheme, model, grid);
        p.jumps = self.jumps;
        p.dividends = self.dividends.clone();
        p.options.boundary = self.boundary;
        p.options.dividend_mode = self.dividend_mode;
        p
    }

    fn has_extras(&self) -> bool {
        self.jumps.is_some_and(|j| j.lambda > 0.0)
            || self.dividends.as_ref().is_some_and(|d| !d.is_empty())
    }

    pub fn reference(&self) -> Result<f64> {
        if let Some(p) = self.reference_price {
            return Ok(p);
        }
        if self.has_extras() {
            return Err(Error::InvalidConfig(
                "reference_price is required with jumps or dividends".into(),
            ));
        }
        fft_price(
            &self.model,
            self.option.strike,
            self.scheme.maturity,
            self.option.kind,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PriceRecord {
    pub kind: OptionKind,
    pub strike: f64,
    pub scheme: SchemeKind,
    pub theta: f64,
    pub n_steps: usize,
    pub price: f64,
}

pub fn cmd_price(cfg: &ExperimentConfig) -> Result<PriceRecord> {
    let grid = cfg.build_grid()?;
    let problem = cfg.problem(&cfg.model, &grid);
    let price = backward_price(&problem, &cfg.option.payoff(cfg.option.strike))?;
    Ok(PriceRecord {
        kind: cfg.option.kind,
        strike: cfg.option.strike,
        scheme: cfg.scheme.scheme,
        theta: cfg.scheme.theta,
        n_steps: cfg.scheme.n_steps,
        price,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StrikePrice {
    pub strike: f64,
    pub price: f64,
}

/// Terminal discounted density and the prices read off it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DensityOutput {
    pub s_nodes: Vec<f64>,
    pub v_nodes: Vec<f64>,
    /// Row-major over `(S, v)`.
    pub density: Vec<f64>,
    pub min_density: f64,
    pub prices: Vec<StrikePrice>,
}

pub fn cmd_density(cfg: &ExperimentConfig) -> Result<DensityOutput> {
    let grid = cfg.build_grid()?;
    let problem = cfg.problem(&cfg.model, &grid);
    let report = forward_density(&problem)?;
    let prices = cfg
        .option
        .strike_list()
        .into_iter()
        .map(|k| {
            Ok(StrikePrice {
                strike: k,
                price: density_price(&report.field, &cfg.option.payoff(k), &grid)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DensityOutput {
        s_nodes: grid.s_nodes().to_vec(),
        v_nodes: grid.v_nodes().to_vec(),
        density: report.field.values,
        min_density: report.min_value,
        prices,
    })
}

/// One backward and one forward solve per theta; rows come back in the
/// order of `cfg.thetas`.
pub fn cmd_theta_sweep(cfg: &ExperimentConfig) -> Result<Vec<ErrorReport>> {
    if cfg.thetas.is_empty() {
        return Err(Error::InvalidConfig(
            "theta_sweep needs a nonempty thetas list".into(),
        ));
    }
    let reference = cfg.reference()?;
    let grid = cfg.build_grid()?;
    let payoff = cfg.option.payoff(cfg.option.strike);
    cfg.thetas
        .par_iter()
        .map(|&theta| {
            let mut problem = cfg.problem(&cfg.model, &grid);
            problem.cfg.theta = theta;
            let (bk, fw) = price_pair(&problem, &payoff)?;
            error_report(theta, bk, fw, reference)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SchemeResiduals {
    pub scheme: SchemeKind,
    /// Closed-form backward matrix against the probed backward step.
    pub closed_form_vs_probe: f64,
    /// Probed forward step against the transposed probed backward step.
    pub transpose: f64,
    /// Probed forward step against the transposed closed form.
    pub transpose_closed_form: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MMatrixVerdicts {
    pub spot_implicit: bool,
    pub variance_implicit: bool,
    pub spot_implicit_transposed: bool,
    pub variance_implicit_transposed: bool,
    pub implicit_euler: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConsistencyReport {
    pub unknowns: usize,
    pub schemes: Vec<SchemeResiduals>,
    pub max_transpose_residual: f64,
    /// `|C_fw - C_bk|` over the full induction with shared boundary rows.
    pub adjoint_residual: Option<f64>,
    pub m_matrix: MMatrixVerdicts,
    /// Interior nodes where the generator is not Metzler.
    pub stencil_violations: usize,
    pub stencil_constraint_violated: bool,
    pub min_forward_density: Option<f64>,
}

/// Dense-oracle checks for one step between the given operator sets.
pub fn consistency_for_operators(
    theta: f64,
    dt: f64,
    ops_prev: &OperatorSet,
    ops_now: &OperatorSet,
) -> Result<ConsistencyReport> {
    let mut schemes = Vec::new();
    for scheme in [SchemeKind::Hv, SchemeKind::Mcs, SchemeKind::ImplicitEuler] {
        let cfg = SchemeConfig {
            scheme,
            theta,
            n_steps: 1,
            damping_start: 0,
            damping_end: 0,
            maturity: dt,
        };
        let closed = assemble_transition_matrix(&cfg, ops_prev, ops_now, dt)?;
        let bk = probe_scheme(&cfg, ops_prev, ops_now, dt, Direction::Backward)?;
        let fw = probe_scheme(&cfg, ops_prev, ops_now, dt, Direction::Forward)?;
        schemes.push(SchemeResiduals {
            scheme,
            closed_form_vs_probe: (&closed.matrix - &bk.matrix).abs().max(),
            transpose: transpose_residual(&bk, &fw),
            transpose_closed_form: transpose_residual(&closed, &fw),
        });
    }
    let max_transpose_residual = schemes
        .iter()
        .map(|s| s.transpose.max(s.transpose_closed_form))
        .fold(0.0, f64::max);
    let n = ops_now.len();
    let verdict = |alpha: f64, a: &crate::operators::StencilMatrix| {
        check_m_matrix(n, &identity_minus(alpha, a)).is_m_matrix
    };
    let th = theta * dt;
    let m_matrix = MMatrixVerdicts {
        spot_implicit: verdict(th, &ops_now.f1),
        variance_implicit: verdict(th, &ops_now.f2),
        spot_implicit_transposed: verdict(th, &ops_now.f1.transpose()),
        variance_implicit_transposed: verdict(th, &ops_now.f2.transpose()),
        implicit_euler: verdict(dt, &ops_now.combined()),
    };
    Ok(ConsistencyReport {
        unknowns: n,
        schemes,
        max_transpose_residual,
        adjoint_residual: None,
        m_matrix,
        stencil_violations: ops_now.positivity_violations,
        stencil_constraint_violated: ops_now.positivity_violations > 0,
        min_forward_density: None,
    })
}

pub fn cmd_consistency_check(cfg: &ExperimentConfig) -> Result<ConsistencyReport> {
    let grid = cfg.build_grid()?;
    let dt = cfg.scheme.dt();
    if dt == 0.0 {
        return Err(Error::InvalidConfig(
            "consistency_check needs maturity > 0".into(),
        ));
    }
    let ops_prev = assemble(&grid, &cfg.model, 0.0, BoundaryRows::Natural)?;
    let ops_now = assemble(&grid, &cfg.model, dt, BoundaryRows::Natural)?;
    let mut report = consistency_for_operators(cfg.scheme.theta, dt, &ops_prev, &ops_now)?;

    let mut problem = cfg.problem(&cfg.model, &grid);
    problem.options.boundary = BoundaryMode::Shared;
    let payoff = cfg.option.payoff(cfg.option.strike);
    let bk = backward_price(&problem, &payoff)?;
    let density = forward_density(&problem)?;
    let fw = density_price(&density.field, &payoff, &grid)?;
    report.adjoint_residual = Some((fw - bk).abs());
    report.min_forward_density = Some(density.min_value);
    report.stencil_violations = report.stencil_violations.max(density.positivity_violations);
    report.stencil_constraint_violated = report.stencil_violations > 0;
    Ok(report)
}

/// Output file format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Format {
    #[default]
    Csv,
    Json,
}

pub fn write_price<W: Write>(rec: &PriceRecord, format: Format, mut out: W) -> Result<()> {
    match format {
        Format::Json => serde_json::to_writer_pretty(&mut out, rec)?,
        Format::Csv => {
            writeln!(out, "kind,strike,scheme,theta,n_steps,price")?;
            writeln!(
                out,
                "{},{},{},{},{},{:.10}",
                kind_name(rec.kind),
                rec.strike,
                scheme_name(rec.scheme),
                rec.theta,
                rec.n_steps,
                rec.price
            )?;
        }
    }
    Ok(())
}

/// CSV: the surface in long form `s,v,density`. JSON: the whole output.
pub fn write_density<W: Write>(d: &DensityOutput, format: Format, mut out: W) -> Result<()> {
    match format {
        Format::Json => serde_json::to_writer_pretty(&mut out, d)?,
        Format::Csv => {
            writeln!(out, "s,v,density")?;
            let nv = d.v_nodes.len();
            for (i, s) in d.s_nodes.iter().enumerate() {
                for (j, v) in d.v_nodes.iter().enumerate() {
                    writeln!(out, "{s:.12e},{v:.12e},{:.12e}", d.density[i * nv + j])?;
                }
            }
        }
    }
    Ok(())
}

pub fn write_strike_prices<W: Write>(prices: &[StrikePrice], mut out: W) -> Result<()> {
    writeln!(out, "strike,price")?;
    for p in prices {
        writeln!(out, "{},{:.10}", p.strike, p.price)?;
    }
    Ok(())
}

pub fn write_sweep<W: Write>(rows: &[ErrorReport], format: Format, mut out: W) -> Result<()> {
    match format {
        Format::Json => serde_json::to_writer_pretty(&mut out, rows)?,
        Format::Csv => {
            writeln!(out, "theta,eps_bk,eps_fw,gap")?;
            for r in rows {
                writeln!(
                    out,
                    "{},{:.6},{:.6},{:.6}",
                    r.theta, r.eps_bk, r.eps_fw, r.gap
                )?;
            }
        }
    }
    Ok(())
}

pub fn write_consistency<W: Write>(
    r: &ConsistencyReport,
    format: Format,
    mut out: W,
) -> Result<()> {
    match format {
        Format::Json => serde_json::to_writer_pretty(&mut out, r)?,
        Format::Csv => {
            writeln!(out, "check,value")?;
            writeln!(out, "unknowns,{}", r.unknowns)?;
            for s in &r.schemes {
                let name = scheme_name(s.scheme);
                writeln!(
                    out,
                    "{name}_closed_form_vs_probe,{:e}",
                    s.closed_form_vs_probe
                )?;
                writeln!(out, "{name}_transpose,{:e}", s.transpose)?;
                writeln!(
                    out,
                    "{name}_transpose_closed_form,{:e}",
                    s.transpose_closed_form
                )?;
            }
            writeln!(out, "max_transpose_residual,{:e}", r.max_transpose_residual)?;
            if let Some(a) = r.adjoint_residual {
                writeln!(out, "adjoint_residual,{a:e}")?;
            }
            let m = &r.m_matrix;
            writeln!(out, "m_matrix_spot_implicit,{}", m.spot_implicit)?;
            writeln!(out, "m_matrix_variance_implicit,{}", m.variance_implicit)?;
            writeln!(
                out,
                "m_matrix_spot_implicit_transposed,{}",
                m.spot_implicit_transposed
            )?;
            writeln!(
                out,
                "m_matrix_variance_implicit_transposed,{}",
                m.variance_implicit_transposed
            )?;
            writeln!(out, "m_matrix_implicit_euler,{}", m.implicit_euler)?;
            writeln!(out, "stencil_violations,{}", r.stencil_violations)?;
            writeln!(
                out,
                "stencil_constraint_violated,{}",
                r.stencil_constraint_violated
            )?;
            if let Some(p) = r.min_forward_density {
                writeln!(out, "min_forward_density,{p:e}")?;
            }
        }
    }
    Ok(())
}

fn scheme_name(s: SchemeKind) -> &'static str {
    match s {
        SchemeKind::Hv => "HV",
        SchemeKind::Mcs => "MCS",
        SchemeKind::ImplicitEuler => "IMPLICIT_EULER",
    }
}

fn kind_name(k: OptionKind) -> &'static str {
    match k {
        OptionKind::Call => "call",
        OptionKind::Put => "put",
    }
}
