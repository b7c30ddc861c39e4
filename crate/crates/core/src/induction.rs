//! Time marching: damping, ADI steps, jump splitting and dividends.
//!
//! The backward induction is first written down as a program of linear
//! stages. A forward induction runs the same program in reverse order with
//! every stage transposed, acting on node masses, so that with shared
//! boundary rows the forward result is exactly the adjoint of the backward
//! one.

use std::collections::HashMap;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::dividends::{
    build_backward_dividend_op, build_forward_dividend_op, snap_dividends, DividendMode,
    DividendOperator,
};
use crate::error::{Error, Result};
use crate::grid::{
    cell_average_payoff, density_to_mass, discretize_delta, integrate_against, mass_to_density,
    Field, FieldKind, Grid2D, Payoff,
};
use crate::jumps::{jump_exponential, jump_operator_for_grid, JumpExponential, JumpOperator};
use crate::model::{
    validate_config, Direction, DividendSchedule, JumpSpec, ModelParams, SchemeConfig, SchemeKind,
};
use crate::operators::{assemble, BoundaryRows};
use crate::schemes::{
    hv_backward, hv_forward, mcs_backward, mcs_forward, EulerFactor, ForwardVariant, LineFactors,
    PreparedOperators, StepContext,
};

/// Boundary treatment of the two directions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryMode {
    /// Both directions use the same boundary rows; forward is the exact
    /// transpose of backward.
    #[default]
    Shared,
    /// Backward pins the values at `S = 0`; forward sets the density to zero
    /// on the far spot and variance boundaries after every step.
    Directional,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct InductionOptions {
    pub boundary: BoundaryMode,
    pub dividend_mode: DividendMode,
    pub forward_variant: ForwardVariant,
}

/// Everything that defines one pricing problem.
#[derive(Debug, Clone)]
pub struct Problem<'a> {
    pub cfg: SchemeConfig,
    pub model: &'a ModelParams,
    pub grid: &'a Grid2D,
    pub jumps: Option<JumpSpec>,
    pub dividends: Option<DividendSchedule>,
    pub options: InductionOptions,
}

impl<'a> Problem<'a> {
    pub fn new(cfg: SchemeConfig, model: &'a ModelParams, grid: &'a Grid2D) -> Self {
        Problem {
            cfg,
            model,
            grid,
            jumps: None,
            dividends: None,
            options: InductionOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InductionReport {
    pub field: Field,
    /// Smallest nodal value seen after any step (densities for forward runs).
    pub min_value: f64,
    /// Largest count of interior nodes where the assembled generator fails
    /// the sign constraint, over all operators used.
    pub positivity_violations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Stage {
    Adi { prev: f64, now: f64, dt: f64 },
    Euler { now: f64, dt: f64 },
    Jump { dt: f64 },
}

#[derive(Debug, Clone, PartialEq)]
enum Block {
    Step(Vec<Stage>),
    Dividend(f64),
}

/// The backward program for `bk_cfg`: blocks in the order they act on
/// values, starting at maturity.
fn backward_program(bk_cfg: &SchemeConfig, jumps: bool, dividends: &[(usize, f64)]) -> Vec<Block> {
    let n_steps = bk_cfg.n_steps;
    let dt = bk_cfg.dt();
    let t_end = bk_cfg.maturity;
    let calendar = |k: usize| if k == n_steps { t_end } else { k as f64 * dt };
    let mut program = Vec::new();
    let push_dividends = |program: &mut Vec<Block>, node: usize| {
        for &(k, d) in dividends {
            if k == node {
                program.push(Block::Dividend(d));
            }
        }
    };
    push_dividends(&mut program, n_steps);
    for n in 1..=n_steps {
        let t_prev = calendar(n_steps - n + 1);
        let t_now = calendar(n_steps - n);
        let damped = bk_cfg.is_damping_step(n);
        let diffusion = |prev: f64, now: f64, dt: f64| {
            if damped {
                Stage::Euler { now, dt }
            } else {
                Stage::Adi { prev, now, dt }
            }
        };
        let stages = if jumps {
            let t_mid = 0.5 * (t_prev + t_now);
            vec![
                diffusion(t_prev, t_mid, 0.5 * dt),
                Stage::Jump { dt },
                diffusion(t_mid, t_now, 0.5 * dt),
            ]
        } else {
            vec![diffusion(t_prev, t_now, dt)]
        };
        program.push(Block::Step(stages));
        push_dividends(&mut program, n_steps - n);
    }
    program
}

/// Operator and factorization caches for one induction.
struct Workspace<'a> {
    grid: &'a Grid2D,
    model: &'a ModelParams,
    rows: BoundaryRows,
    theta: f64,
    scheme: SchemeKind,
    time_dependent: bool,
    ops: HashMap<u64, Rc<PreparedOperators>>,
    lines: HashMap<(u64, u64), Rc<LineFactors>>,
    euler: HashMap<(u64, u64), Rc<EulerFactor>>,
    jump_op: Option<JumpOperator>,
    jump_exp: HashMap<u64, Rc<JumpExponential>>,
    dividend_ops: HashMap<u64, Rc<DividendOperator>>,
    dividend_mode: DividendMode,
    violations: usize,
}

impl<'a> Workspace<'a> {
    fn key(&self, t: f64) -> u64 {
        if self.time_dependent {
            t.to_bits()
        } else {
            0
        }
    }

    fn ops(&mut self, t: f64) -> Result<Rc<PreparedOperators>> {
        let key = self.key(t);
        if let Some(p) = self.ops.get(&key) {
            return Ok(p.clone());
        }
        let ops = assemble(self.grid, self.model, t, self.rows)?;
        self.violations = self.violations.max(ops.positivity_violations);
        let p = Rc::new(PreparedOperators::new(ops));
        self.ops.insert(key, p.clone());
        Ok(p)
    }

    fn lines(&mut self, t: f64, dt: f64) -> Result<Rc<LineFactors>> {
        let key = (self.key(t), dt.to_bits());
        if let Some(f) = self.lines.get(&key) {
            return Ok(f.clone());
        }
        let ops = self.ops(t)?;
        let f = Rc::new(LineFactors::new(&ops.ops, self.theta * dt)?);
        self.lines.insert(key, f.clone());
        Ok(f)
    }

    fn euler(&mut self, t: f64, dt: f64) -> Result<Rc<EulerFactor>> {
        let key = (self.key(t), dt.to_bits());
        if let Some(f) = self.euler.get(&key) {
            return Ok(f.clone());
        }
        let ops = self.ops(t)?;
        let f = Rc::new(EulerFactor::new(&ops.ops, dt)?);
        self.euler.insert(key, f.clone());
        Ok(f)
    }

    fn jump(&mut self, dt: f64) -> Result<Rc<JumpExponential>> {
        if let Some(e) = self.jump_exp.get(&dt.to_bits()) {
            return Ok(e.clone());
        }
        let op = self
            .jump_op
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig("jump stage without jump operator".into()))?;
        let e = Rc::new(jump_exponential(op, dt)?);
        self.jump_exp.insert(dt.to_bits(), e.clone());
        Ok(e)
    }

    fn dividend(&mut self, d: f64, direction: Direction) -> Result<Rc<DividendOperator>> {
        if let Some(op) = self.dividend_ops.get(&d.to_bits()) {
            return Ok(op.clone());
        }
        let op = Rc::new(match direction {
            Direction::Backward => build_backward_dividend_op(self.grid, d)?,
            Direction::Forward => build_forward_dividend_op(self.grid, d, self.dividend_mode)?,
        });
        self.dividend_ops.insert(d.to_bits(), op.clone());
        Ok(op)
    }

    fn run_stage(
        &mut self,
        stage: Stage,
        v: &[f64],
        direction: Direction,
        variant: ForwardVariant,
    ) -> Result<Vec<f64>> {
        match stage {
            Stage::Adi { prev, now, dt } => {
                let p = self.ops(prev)?;
                let q = self.ops(now)?;
                let factors = self.lines(now, dt)?;
                let ctx = StepContext {
                    prev: &p,
                    now: &q,
                    factors: &factors,
                    theta: self.theta,
                    dt,
                };
                Ok(match (self.scheme, direction) {
                    (SchemeKind::Mcs, Direction::Backward) => mcs_backward(&ctx, v),
                    (SchemeKind::Mcs, Direction::Forward) => mcs_forward(&ctx, v),
                    (_, Direction::Backward) => hv_backward(&ctx, v),
                    (_, Direction::Forward) => hv_forward(&ctx, v, variant),
                })
            }
            Stage::Euler { now, dt } => self.euler(now, dt)?.solve(v, direction),
            Stage::Jump { dt } => Ok(self.jump(dt)?.apply(v, self.grid.nv(), direction)),
        }
    }
}

fn check_kind(initial: &Field, direction: Direction) -> Result<()> {
    let expected = match direction {
        Direction::Backward => FieldKind::OptionValue,
        Direction::Forward => FieldKind::Density,
    };
    if initial.kind != expected {
        return Err(Error::FieldKind(format!(
            "{direction:?} induction needs a {expected:?} field, got {:?}",
            initial.kind
        )));
    }
    Ok(())
}

/// March `initial` over `[0, maturity]`.
///
/// Damping steps are counted from the start of this induction: for a forward
/// run `cfg.damping_start` refers to the first calendar steps. Pass
/// `cfg.mirrored()` to obtain the exact transpose of a backward run with
/// `cfg`.
pub fn run_induction(
    problem: &Problem,
    initial: &Field,
    direction: Direction,
) -> Result<InductionReport> {
    let cfg = &problem.cfg;
    validate_config(cfg)?;
    problem.model.validate()?;
    initial.check_grid(problem.grid)?;
    check_kind(initial, direction)?;
    let grid = problem.grid;

    if let Some(j) = &problem.jumps {
        j.validate()?;
    }
    let jumps_on = problem.jumps.as_ref().is_some_and(|j| j.lambda > 0.0);
    let dividends: Vec<(usize, f64)> = match &problem.dividends {
        Some(s) if !s.is_empty() => snap_dividends(s, cfg.maturity, cfg.n_steps, problem.model.r)?
            .into_iter()
            .map(|d| (d.node, d.d))
            .collect(),
        _ => Vec::new(),
    };

    let positivity_probe = assemble(grid, problem.model, 0.0, BoundaryRows::Natural)?;
    if cfg.maturity == 0.0 {
        return Ok(InductionReport {
            field: initial.clone(),
            min_value: initial.min(),
            positivity_violations: positivity_probe.positivity_violations,
        });
    }

    let rows = match (problem.options.boundary, direction) {
        (BoundaryMode::Directional, Direction::Backward) => BoundaryRows::PinnedLowerSpot,
        _ => BoundaryRows::Natural,
    };
    let mut ws = Workspace {
        grid,
        model: problem.model,
        rows,
        theta: cfg.theta,
        scheme: cfg.scheme,
        time_dependent: problem.model.has_time_dependent_coefficients(),
        ops: HashMap::new(),
        lines: HashMap::new(),
        euler: HashMap::new(),
        jump_op: if jumps_on {
            Some(jump_operator_for_grid(
                problem.jumps.as_ref().unwrap(),
                problem.model,
                grid,
            )?)
        } else {
            None
        },
        jump_exp: HashMap::new(),
        dividend_ops: HashMap::new(),
        dividend_mode: problem.options.dividend_mode,
        violations: positivity_probe.positivity_violations,
    };
    let variant = problem.options.forward_variant;
    let (ns, nv) = (grid.ns(), grid.nv());

    match direction {
        Direction::Backward => {
            let program = backward_program(cfg, jumps_on, &dividends);
            let mut v = initial.values.clone();
            let mut min_value = initial.min();
            for block in &program {
                match block {
                    Block::Step(stages) => {
                        for &stage in stages {
                            v = ws.run_stage(stage, &v, direction, variant)?;
                        }
                        min_value = min_value.min(v.iter().copied().fold(f64::INFINITY, f64::min));
                    }
                    Block::Dividend(d) => v = ws.dividend(*d, direction)?.apply(&v, nv)?,
                }
            }
            Ok(InductionReport {
                field: Field {
                    values: v,
                    kind: FieldKind::OptionValue,
                },
                min_value,
                positivity_violations: ws.violations,
            })
        }
        Direction::Forward => {
            let program = backward_program(&cfg.mirrored(), jumps_on, &dividends);
            let mut m = density_to_mass(initial, grid);
            let mut min_value = initial.min();
            let directional = problem.options.boundary == BoundaryMode::Directional;
            for block in program.iter().rev() {
                match block {
                    Block::Step(stages) => {
                        for &stage in stages.iter().rev() {
                            m = ws.run_stage(stage, &m, direction, variant)?;
                        }
                        if directional {
                            for i in 0..ns {
                                m[i * nv + nv - 1] = 0.0;
                            }
                            for j in 0..nv {
                                m[(ns - 1) * nv + j] = 0.0;
                            }
                        }
                        min_value = min_value.min(mass_to_density(&m, grid).min());
                    }
                    Block::Dividend(d) => m = ws.dividend(*d, direction)?.apply(&m, nv)?,
                }
            }
            Ok(InductionReport {
                field: mass_to_density(&m, grid),
                min_value,
                positivity_violations: ws.violations,
            })
        }
    }
}

/// Backward price at `(S0, v0)`.
pub fn backward_price(problem: &Problem, payoff: &Payoff) -> Result<f64> {
    let initial = cell_average_payoff(payoff, problem.grid);
    let report = run_induction(problem, &initial, Direction::Backward)?;
    let (i0, j0) = problem.grid.spot_node(problem.model)?;
    Ok(report.field.values[problem.grid.index(i0, j0)])
}

/// Discounted density at maturity from the forward run that is the
/// transpose of the backward run of `problem`.
pub fn forward_density(problem: &Problem) -> Result<InductionReport> {
    let mut fw = problem.clone();
    fw.cfg = problem.cfg.mirrored();
    let initial = discretize_delta(problem.grid, problem.model)?;
    run_induction(&fw, &initial, Direction::Forward)
}

/// Price of `payoff` against a terminal density.
pub fn density_price(density: &Field, payoff: &Payoff, grid: &Grid2D) -> Result<f64> {
    integrate_against(density, &cell_average_payoff(payoff, grid), grid)
}

/// Backward and forward prices of the same problem.
pub fn price_pair(problem: &Problem, payoff: &Payoff) -> Result<(f64, f64)> {
    let bk = backward_price(problem, payoff)?;
    let density = forward_density(problem)?;
    Ok((bk, density_price(&density.field, payoff, problem.grid)?))
}
