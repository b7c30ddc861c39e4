//! HV and MCS fractional-step schemes, their exact forward transposes and
//! implicit-Euler damping steps.
//!
//! Every step maps the level-`n-1` vector to level `n` using the operators
//! frozen at both ends of the step: `prev` (explicit stages) and `now`
//! (implicit stages). A backward step applies a matrix `R`, the matching
//! forward step applies `R^T` built from the same operator data.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::grid::Field;
use crate::linalg::{BandLu, BandMatrix, TridiagLu};
use crate::model::{Direction, SchemeConfig, SchemeKind};
use crate::operators::{slot, transpose, OperatorSet, StencilMatrix, CENTER};

/// Largest system for which dense oracle matrices are built.
pub const MAX_DENSE_SIZE: usize = 2500;

/// Tridiagonal factors of `M1 = I - theta dt F1` (one per variance row) and
/// `M2 = I - theta dt F2` (one per spot column).
#[derive(Debug, Clone)]
pub struct LineFactors {
    ns: usize,
    nv: usize,
    m1: Vec<TridiagLu>,
    m2: Vec<TridiagLu>,
}

fn shifted_line(line: (Vec<f64>, Vec<f64>, Vec<f64>), alpha: f64) -> Result<TridiagLu> {
    let (a, b, c) = line;
    let a: Vec<f64> = a.iter().map(|x| -alpha * x).collect();
    let b: Vec<f64> = b.iter().map(|x| 1.0 - alpha * x).collect();
    let c: Vec<f64> = c.iter().map(|x| -alpha * x).collect();
    TridiagLu::new(&a, &b, &c)
}

impl LineFactors {
    /// Factor `I - theta_dt * F_j` of the untransposed operators `ops`.
    pub fn new(ops: &OperatorSet, theta_dt: f64) -> Result<Self> {
        if ops.transposed {
            return Err(Error::InvalidConfig(
                "line factors need untransposed operators".into(),
            ));
        }
        let (ns, nv) = ops.dims();
        let m1 = (0..nv)
            .map(|j| shifted_line(ops.f1.spot_line(j), theta_dt))
            .collect::<Result<Vec<_>>>()?;
        let m2 = (0..ns)
            .map(|i| shifted_line(ops.f2.variance_line(i), theta_dt))
            .collect::<Result<Vec<_>>>()?;
        Ok(LineFactors { ns, nv, m1, m2 })
    }

    fn spot_sweep(&self, x: &mut [f64], transposed: bool) {
        let mut line = vec![0.0; self.ns];
        for j in 0..self.nv {
            for i in 0..self.ns {
                line[i] = x[i * self.nv + j];
            }
            if transposed {
                self.m1[j].solve_transpose(&mut line);
            } else {
                self.m1[j].solve(&mut line);
            }
            for i in 0..self.ns {
                x[i * self.nv + j] = line[i];
            }
        }
    }

    fn variance_sweep(&self, x: &mut [f64], transposed: bool) {
        for i in 0..self.ns {
            let line = &mut x[i * self.nv..(i + 1) * self.nv];
            if transposed {
                self.m2[i].solve_transpose(line);
            } else {
                self.m2[i].solve(line);
            }
        }
    }

    pub fn solve_m1(&self, x: &mut [f64]) {
        self.spot_sweep(x, false);
    }

    pub fn solve_m1_transpose(&self, x: &mut [f64]) {
        self.spot_sweep(x, true);
    }

    pub fn solve_m2(&self, x: &mut [f64]) {
        self.variance_sweep(x, false);
    }

    pub fn solve_m2_transpose(&self, x: &mut [f64]) {
        self.variance_sweep(x, true);
    }
}

/// Operators at one time label together with their transposes.
#[derive(Debug, Clone)]
pub struct PreparedOperators {
    pub ops: OperatorSet,
    pub ops_t: OperatorSet,
}

impl PreparedOperators {
    pub fn new(ops: OperatorSet) -> Self {
        let ops_t = transpose(&ops);
        PreparedOperators { ops, ops_t }
    }
}

/// Forward coefficient operators built from transposed operators
/// `ops_t` at a single time label, applied lazily.
#[derive(Debug, Clone, Copy)]
pub struct SchemeCoefficients<'a> {
    ops_t: &'a OperatorSet,
    theta: f64,
}

impl<'a> SchemeCoefficients<'a> {
    pub fn new(ops_t: &'a OperatorSet, theta: f64) -> Self {
        debug_assert!(ops_t.transposed);
        SchemeCoefficients { ops_t, theta }
    }

    pub fn t_label(&self) -> f64 {
        self.ops_t.t_label
    }

    /// `y += alpha * (a F^T + b F1^T + c F2^T) x`.
    fn combo(&self, alpha: f64, a: f64, b: f64, c: f64, x: &[f64], y: &mut [f64]) {
        let o = self.ops_t;
        if a != 0.0 {
            o.f0.apply_add(alpha * a, x, y);
        }
        if a + b != 0.0 {
            o.f1.apply_add(alpha * (a + b), x, y);
        }
        if a + c != 0.0 {
            o.f2.apply_add(alpha * (a + c), x, y);
        }
    }

    /// `y += alpha * c0 x`, `c0 = F^T / 2`.
    pub fn c0(&self, alpha: f64, x: &[f64], y: &mut [f64]) {
        self.combo(alpha, 0.5, 0.0, 0.0, x, y);
    }

    /// `c1 = F^T / 2 - theta F1^T`.
    pub fn c1(&self, alpha: f64, x: &[f64], y: &mut [f64]) {
        self.combo(alpha, 0.5, -self.theta, 0.0, x, y);
    }

    /// `c2 = theta F2^T`.
    pub fn c2(&self, alpha: f64, x: &[f64], y: &mut [f64]) {
        self.combo(alpha, 0.0, 0.0, self.theta, x, y);
    }

    /// `c3 = F^T - theta F1^T`.
    pub fn c3(&self, alpha: f64, x: &[f64], y: &mut [f64]) {
        self.combo(alpha, 1.0, -self.theta, 0.0, x, y);
    }

    /// `c+ = F^T / 2 + theta (F1^T + F2^T)`.
    pub fn c_plus(&self, alpha: f64, x: &[f64], y: &mut [f64]) {
        self.combo(alpha, 0.5, self.theta, self.theta, x, y);
    }

    /// `c- = F^T / 2 - theta (F1^T + F2^T)`.
    pub fn c_minus(&self, alpha: f64, x: &[f64], y: &mut [f64]) {
        self.combo(alpha, 0.5, -self.theta, -self.theta, x, y);
    }
}

/// Two variants of the forward HV step; both apply `R^T` in exact
/// arithmetic. `Direct` evaluates the inner `R2^T` on a small difference
/// vector and is only kept to compare round-off behaviour.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ForwardVariant {
    #[default]
    Rearranged,
    Direct,
}

/// Everything one ADI step needs.
#[derive(Debug, Clone, Copy)]
pub struct StepContext<'a> {
    pub prev: &'a PreparedOperators,
    pub now: &'a PreparedOperators,
    /// Factors of `I - theta dt F_j` at `now`.
    pub factors: &'a LineFactors,
    pub theta: f64,
    pub dt: f64,
}

fn diff(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn hv_backward(ctx: &StepContext, v: &[f64]) -> Vec<f64> {
    let (a, b) = (&ctx.prev.ops, &ctx.now.ops);
    let (th, dt) = (ctx.theta, ctx.dt);

    let mut y0 = v.to_vec();
    a.apply_full_add(dt, v, &mut y0);
    let mut y1 = y0.clone();
    a.f1.apply_add(-th * dt, v, &mut y1);
    ctx.factors.solve_m1(&mut y1);
    let mut y2 = y1;
    a.f2.apply_add(-th * dt, v, &mut y2);
    ctx.factors.solve_m2(&mut y2);

    let mut z0 = y0;
    b.apply_full_add(0.5 * dt, &y2, &mut z0);
    a.apply_full_add(-0.5 * dt, v, &mut z0);
    let mut z1 = z0;
    b.f1.apply_add(-th * dt, &y2, &mut z1);
    ctx.factors.solve_m1(&mut z1);
    let mut z2 = z1;
    b.f2.apply_add(-th * dt, &y2, &mut z2);
    ctx.factors.solve_m2(&mut z2);
    z2
}

pub fn hv_forward(ctx: &StepContext, p: &[f64], variant: ForwardVariant) -> Vec<f64> {
    let c_prev = SchemeCoefficients::new(&ctx.prev.ops_t, ctx.theta);
    let c_now = SchemeCoefficients::new(&ctx.now.ops_t, ctx.theta);
    let dt = ctx.dt;

    let mut y0 = p.to_vec();
    ctx.factors.solve_m2_transpose(&mut y0);
    let mut y1 = y0.clone();
    ctx.factors.solve_m1_transpose(&mut y1);

    match variant {
        ForwardVariant::Rearranged => {
            let mut z0 = p.to_vec();
            c_now.c1(dt, &y1, &mut z0);
            c_now.c2(-dt, &y0, &mut z0);
            let mut z1 = z0;
            ctx.factors.solve_m2_transpose(&mut z1);
            let mut z2 = z1.clone();
            ctx.factors.solve_m1_transpose(&mut z2);

            let mut out = z2.clone();
            c_prev.c3(dt, &diff(&z2, &y1), &mut out);
            c_prev.c2(-dt, &diff(&z1, &y0), &mut out);
            c_prev.c0(dt, &y1, &mut out);
            out
        }
        ForwardVariant::Direct => {
            let mut z0 = vec![0.0; p.len()];
            c_now.c1(1.0, &y1, &mut z0);
            c_now.c2(-1.0, &y0, &mut z0);
            let mut z1 = z0;
            ctx.factors.solve_m2_transpose(&mut z1);
            let mut z2 = z1.clone();
            ctx.factors.solve_m1_transpose(&mut z2);

            // R2^T z0 = z2 + dt (c3 z2 - c2 z1)
            let mut inner = z2.clone();
            c_prev.c3(dt, &z2, &mut inner);
            c_prev.c2(-dt, &z1, &mut inner);
            let mut out = y1.clone();
            c_prev.c0(dt, &y1, &mut out);
            for (o, x) in out.iter_mut().zip(&inner) {
                *o += dt * x;
            }
            out
        }
    }
}

pub fn mcs_backward(ctx: &StepContext, v: &[f64]) -> Vec<f64> {
    let (a, b) = (&ctx.prev.ops, &ctx.now.ops);
    let (th, dt) = (ctx.theta, ctx.dt);

    let mut y0 = v.to_vec();
    a.apply_full_add(dt, v, &mut y0);
    let mut y1 = y0.clone();
    a.f1.apply_add(-th * dt, v, &mut y1);
    ctx.factors.solve_m1(&mut y1);
    let mut y2 = y1;
    a.f2.apply_add(-th * dt, v, &mut y2);
    ctx.factors.solve_m2(&mut y2);

    let mut z0 = y0;
    b.apply_full_add(0.5 * dt, &y2, &mut z0);
    a.apply_full_add(-0.5 * dt, v, &mut z0);
    b.f1.apply_add(-th * dt, &y2, &mut z0);
    b.f2.apply_add(-th * dt, &y2, &mut z0);
    a.f1.apply_add(th * dt, v, &mut z0);
    a.f2.apply_add(th * dt, v, &mut z0);
    let mut z1 = z0;
    b.f1.apply_add(-th * dt, v, &mut z1);
    ctx.factors.solve_m1(&mut z1);
    let mut z2 = z1;
    b.f2.apply_add(-th * dt, v, &mut z2);
    ctx.factors.solve_m2(&mut z2);
    z2
}

pub fn mcs_forward(ctx: &StepContext, p: &[f64]) -> Vec<f64> {
    let c_prev = SchemeCoefficients::new(&ctx.prev.ops_t, ctx.theta);
    let c_now = SchemeCoefficients::new(&ctx.now.ops_t, ctx.theta);
    let (th, dt) = (ctx.theta, ctx.dt);

    let mut y0 = p.to_vec();
    ctx.factors.solve_m2_transpose(&mut y0);
    let mut y1 = y0.clone();
    ctx.factors.solve_m1_transpose(&mut y1);

    let mut z0 = p.to_vec();
    c_now.c_minus(dt, &y1, &mut z0);
    let mut z1 = z0;
    ctx.factors.solve_m2_transpose(&mut z1);
    let mut z2 = z1.clone();
    ctx.factors.solve_m1_transpose(&mut z2);

    let mut out = z2.clone();
    c_prev.c3(dt, &diff(&z2, &y1), &mut out);
    c_prev.c2(-dt, &diff(&z1, &y0), &mut out);
    c_prev.c_plus(dt, &y1, &mut out);
    ctx.now.ops_t.f1.apply_add(-th * dt, &y1, &mut out);
    c_now.c2(-dt, &y0, &mut out);
    out
}

/// Band LU of `I - dt F` for the full generator.
#[derive(Debug, Clone)]
pub struct EulerFactor {
    matrix: BandMatrix,
    lu: BandLu,
}

fn stencil_band(f: &StencilMatrix, dt: f64) -> BandMatrix {
    let (ns, nv) = f.dims();
    let n = ns * nv;
    let mut m = BandMatrix::zeros(n, nv + 1, nv + 1);
    for (r, c, w) in f.triplets() {
        m.add(r, c, -dt * w);
    }
    for k in 0..n {
        m.add(k, k, 1.0);
    }
    m
}

const RESIDUAL_TOLERANCE: f64 = 1e-9;

impl EulerFactor {
    pub fn new(ops: &OperatorSet, dt: f64) -> Result<Self> {
        if ops.transposed {
            return Err(Error::InvalidConfig(
                "implicit Euler needs untransposed operators".into(),
            ));
        }
        let matrix = stencil_band(&ops.combined(), dt);
        let lu = BandLu::new(matrix.clone())?;
        Ok(EulerFactor { matrix, lu })
    }

    /// Solve `(I - dt F) x = b`, or its transpose for the forward direction.
    pub fn solve(&self, b: &[f64], direction: Direction) -> Result<Vec<f64>> {
        let mut x = b.to_vec();
        let ax = match direction {
            Direction::Backward => {
                self.lu.solve(&mut x);
                self.matrix.matvec(&x)
            }
            Direction::Forward => {
                self.lu.solve_transpose(&mut x);
                self.matrix.matvec_transpose(&x)
            }
        };
        let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
        let residual = ax
            .iter()
            .zip(b)
            .fold(0.0f64, |m, (p, q)| m.max((p - q).abs()))
            / scale;
        if !(residual <= RESIDUAL_TOLERANCE) {
            return Err(Error::SolverFailure { residual });
        }
        Ok(x)
    }
}

fn check_step(dt: f64, theta: f64) -> Result<()> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "time step {dt} must be positive"
        )));
    }
    if !(theta > 0.0 && theta <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "theta {theta} outside (0, 1]"
        )));
    }
    Ok(())
}

fn check_pair(ops_prev: &OperatorSet, ops_now: &OperatorSet, v: &Field) -> Result<()> {
    if ops_prev.dims() != ops_now.dims() {
        return Err(Error::GridMismatch {
            expected: ops_now.len(),
            actual: ops_prev.len(),
        });
    }
    if v.len() != ops_now.len() {
        return Err(Error::GridMismatch {
            expected: ops_now.len(),
            actual: v.len(),
        });
    }
    Ok(())
}

fn one_step<F>(
    ops_prev: &OperatorSet,
    ops_now: &OperatorSet,
    theta: f64,
    dt: f64,
    v: &Field,
    f: F,
) -> Result<Field>
where
    F: Fn(&StepContext, &[f64]) -> Vec<f64>,
{
    check_step(dt, theta)?;
    check_pair(ops_prev, ops_now, v)?;
    let prev = PreparedOperators::new(ops_prev.clone());
    let now = PreparedOperators::new(ops_now.clone());
    let factors = LineFactors::new(ops_now, theta * dt)?;
    let ctx = StepContext {
        prev: &prev,
        now: &now,
        factors: &factors,
        theta,
        dt,
    };
    Ok(Field {
        values: f(&ctx, &v.values),
        kind: v.kind,
    })
}

pub fn hv_backward_step(
    ops_prev: &OperatorSet,
    ops_now: &OperatorSet,
    theta: f64,
    dt: f64,
    v: &Field,
) -> Result<Field> {
    one_step(ops_prev, ops_now, theta, dt, v, hv_backward)
}

pub fn hv_forward_step(
    ops_prev: &OperatorSet,
    ops_now: &OperatorSet,
    theta: f64,
    dt: f64,
    p: &Field,
) -> Result<Field> {
    one_step(ops_prev, ops_now, theta, dt, p, |c, x| {
        hv_forward(c, x, ForwardVariant::Rearranged)
    })
}

pub fn mcs_backward_step(
    ops_prev: &OperatorSet,
    ops_now: &OperatorSet,
    theta: f64,
    dt: f64,
    v: &Field,
) -> Result<Field> {
    one_step(ops_prev, ops_now, theta, dt, v, mcs_backward)
}

pub fn mcs_forward_step(
    ops_prev: &OperatorSet,
    ops_now: &OperatorSet,
    theta: f64,
    dt: f64,
    p: &Field,
) -> Result<Field> {
    one_step(ops_prev, ops_now, theta, dt, p, mcs_forward)
}

pub fn implicit_euler_step(
    ops: &OperatorSet,
    dt: f64,
    v: &Field,
    direction: Direction,
) -> Result<Field> {
    check_step(dt, 1.0)?;
    check_pair(ops, ops, v)?;
    let factor = EulerFactor::new(ops, dt)?;
    Ok(Field {
        values: factor.solve(&v.values, direction)?,
        kind: v.kind,
    })
}

/// Dense one-step matrix of a scheme.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    pub matrix: DMatrix<f64>,
    pub direction: Direction,
}

impl TransitionMatrix {
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (&self.matrix * nalgebra::DVector::from_column_slice(x))
            .as_slice()
            .to_vec()
    }

    pub fn write_csv<W: std::io::Write>(&self, mut out: W) -> Result<()> {
        for r in 0..self.matrix.nrows() {
            let row: Vec<String> = (0..self.matrix.ncols())
                .map(|c| format!("{:.17e}", self.matrix[(r, c)]))
                .collect();
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

fn size_guard(n: usize) -> Result<()> {
    if n > MAX_DENSE_SIZE {
        return Err(Error::SizeGuard {
            size: n,
            max: MAX_DENSE_SIZE,
        });
    }
    Ok(())
}

fn solve_dense(m: &DMatrix<f64>, rhs: DMatrix<f64>) -> Result<DMatrix<f64>> {
    m.clone()
        .lu()
        .solve(&rhs)
        .ok_or(Error::Singular { row: 0, pivot: 0.0 })
}

/// Closed-form backward step matrix from dense split pieces `[F0, F1, F2]`
/// at the previous and current time labels.
pub fn compose_dense(
    scheme: SchemeKind,
    theta: f64,
    dt: f64,
    prev: &[DMatrix<f64>; 3],
    now: &[DMatrix<f64>; 3],
) -> Result<DMatrix<f64>> {
    let n = now[0].nrows();
    let id = DMatrix::<f64>::identity(n, n);
    let [a0, a1, a2] = prev;
    let [b0, b1, b2] = now;
    let a = a0 + a1 + a2;
    let b = b0 + b1 + b2;
    let th = theta;
    Ok(match scheme {
        SchemeKind::ImplicitEuler => solve_dense(&(&id - &b * dt), id.clone())?,
        SchemeKind::Hv | SchemeKind::Mcs => {
            let m1 = &id - b1 * (th * dt);
            let m2 = &id - b2 * (th * dt);
            let inner = solve_dense(&m1, &id + (&a - a1 * th) * dt)?;
            let r2 = solve_dense(&m2, inner - a2 * (th * dt))?;
            if scheme == SchemeKind::Hv {
                let core = &id + (&a + &b * &r2) * (0.5 * dt) - b1 * &r2 * (th * dt);
                let inner = solve_dense(&m1, core)?;
                solve_dense(&m2, inner - b2 * &r2 * (th * dt))?
            } else {
                let core = &id + (&a * 0.5 + (a1 + a2) * th) * dt - b1 * (th * dt)
                    + (&b * 0.5 - (b1 + b2) * th) * &r2 * dt;
                let inner = solve_dense(&m1, core)?;
                solve_dense(&m2, inner - b2 * (th * dt))?
            }
        }
    })
}

/// Backward transition matrix from the closed-form composition of the
/// scheme stages.
pub fn assemble_transition_matrix(
    cfg: &SchemeConfig,
    ops_prev: &OperatorSet,
    ops_now: &OperatorSet,
    dt: f64,
) -> Result<TransitionMatrix> {
    let n = ops_now.len();
    size_guard(n)?;
    if ops_prev.dims() != ops_now.dims() {
        return Err(Error::GridMismatch {
            expected: n,
            actual: ops_prev.len(),
        });
    }
    let matrix = compose_dense(
        cfg.scheme,
        cfg.theta,
        dt,
        &ops_prev.to_dense(),
        &ops_now.to_dense(),
    )?;
    Ok(TransitionMatrix {
        matrix,
        direction: Direction::Backward,
    })
}

/// Matrix of any linear step obtained by applying it to unit vectors.
pub fn probe_transition_matrix<F>(
    n: usize,
    direction: Direction,
    step: F,
) -> Result<TransitionMatrix>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    size_guard(n)?;
    let mut matrix = DMatrix::zeros(n, n);
    let mut e = vec![0.0; n];
    for k in 0..n {
        e[k] = 1.0;
        let col = step(&e)?;
        e[k] = 0.0;
        for r in 0..n {
            matrix[(r, k)] = col[r];
        }
    }
    Ok(TransitionMatrix { matrix, direction })
}

/// Probe the configured scheme's step in either direction.
pub fn probe_scheme(
    cfg: &SchemeConfig,
    ops_prev: &OperatorSet,
    ops_now: &OperatorSet,
    dt: f64,
    direction: Direction,
) -> Result<TransitionMatrix> {
    let n = ops_now.len();
    size_guard(n)?;
    let prev = PreparedOperators::new(ops_prev.clone());
    let now = PreparedOperators::new(ops_now.clone());
    let factors = LineFactors::new(ops_now, cfg.theta * dt)?;
    let euler = EulerFactor::new(ops_now, dt)?;
    let ctx = StepContext {
        prev: &prev,
        now: &now,
        factors: &factors,
        theta: cfg.theta,
        dt,
    };
    probe_transition_matrix(n, direction, |x| {
        Ok(match (cfg.scheme, direction) {
            (SchemeKind::Hv, Direction::Backward) => hv_backward(&ctx, x),
            (SchemeKind::Hv, Direction::Forward) => hv_forward(&ctx, x, ForwardVariant::Rearranged),
            (SchemeKind::Mcs, Direction::Backward) => mcs_backward(&ctx, x),
            (SchemeKind::Mcs, Direction::Forward) => mcs_forward(&ctx, x),
            (SchemeKind::ImplicitEuler, d) => euler.solve(x, d)?,
        })
    })
}

/// Max elementwise `|R_fw - R_bk^T|`.
pub fn transpose_residual(backward: &TransitionMatrix, forward: &TransitionMatrix) -> f64 {
    let bt = backward.matrix.transpose();
    (&forward.matrix - bt).abs().max()
}

/// Zero the weights of a stencil outside the allowed slots; used to build
/// toy operators with the split structure.
pub fn restrict_to_split(f: &mut StencilMatrix, allowed: &[usize]) {
    let (ns, nv) = f.dims();
    for i in 0..ns {
        for j in 0..nv {
            let w = f.weights_mut(i, j);
            for (k, wk) in w.iter_mut().enumerate() {
                if !allowed.contains(&k) {
                    *wk = 0.0;
                }
            }
        }
    }
}

/// Slots used by the spot-direction piece.
pub const SPOT_SLOTS: [usize; 3] = [slot(-1, 0), CENTER, slot(1, 0)];
/// Slots used by the variance-direction piece.
pub const VARIANCE_SLOTS: [usize; 3] = [slot(0, -1), CENTER, slot(0, 1)];

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_grid, FieldKind, GridSpec};
    use crate::model::ModelParams;
    use crate::operators::{assemble, BoundaryRows};

    /// Deterministic pseudo-random toy operators with the split structure.
    fn toy_ops(ns: usize, nv: usize, seed: u64, t: f64) -> OperatorSet {
        let mut state = seed;
        let mut next = || {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        };
        let mut ops = OperatorSet::zeros(ns, nv);
        for i in 0..ns {
            for j in 0..nv {
                for k in 0..9 {
                    ops.f0.weights_mut(i, j)[k] = next();
                    ops.f1.weights_mut(i, j)[k] = next();
                    ops.f2.weights_mut(i, j)[k] = next();
                }
                ops.f1.weights_mut(i, j)[CENTER] -= 2.0;
                ops.f2.weights_mut(i, j)[CENTER] -= 2.0;
            }
        }
        restrict_to_split(&mut ops.f1, &SPOT_SLOTS);
        restrict_to_split(&mut ops.f2, &VARIANCE_SLOTS);
        ops.t_label = t;
        ops
    }

    fn cfg(scheme: SchemeKind, theta: f64) -> SchemeConfig {
        SchemeConfig {
            scheme,
            theta,
            n_steps: 1,
            damping_start: 0,
            damping_end: 0,
            maturity: 0.1,
        }
    }

    fn max_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).abs().max()
    }

    #[test]
    fn zero_operators_are_identity() {
        let ops = OperatorSet::zeros(3, 4);
        let v = Field {
            values: (0..12).map(|k| k as f64 * 0.7 - 2.0).collect(),
            kind: FieldKind::OptionValue,
        };
        for out in [
            hv_backward_step(&ops, &ops, 0.5, 0.1, &v).unwrap(),
            hv_forward_step(&ops, &ops, 0.5, 0.1, &v).unwrap(),
            mcs_backward_step(&ops, &ops, 0.5, 0.1, &v).unwrap(),
            mcs_forward_step(&ops, &ops, 0.5, 0.1, &v).unwrap(),
            implicit_euler_step(&ops, 0.1, &v, Direction::Backward).unwrap(),
            implicit_euler_step(&ops, 0.1, &v, Direction::Forward).unwrap(),
        ] {
            assert_eq!(out, v);
        }
        for scheme in [SchemeKind::Hv, SchemeKind::Mcs, SchemeKind::ImplicitEuler] {
            let r = assemble_transition_matrix(&cfg(scheme, 0.5), &ops, &ops, 0.1).unwrap();
            assert_eq!(r.matrix, DMatrix::identity(12, 12));
        }
    }

    #[test]
    fn closed_form_matches_probing_and_forward_is_transpose() {
        let prev = toy_ops(3, 4, 7, 0.0);
        let now = toy_ops(3, 4, 11, 0.1);
        for scheme in [SchemeKind::Hv, SchemeKind::Mcs, SchemeKind::ImplicitEuler] {
            for theta in [0.3, 0.5, 0.8, 1.0] {
                let c = cfg(scheme, theta);
                let closed = assemble_transition_matrix(&c, &prev, &now, 0.1).unwrap();
                let probed = probe_scheme(&c, &prev, &now, 0.1, Direction::Backward).unwrap();
                assert!(
                    max_diff(&closed.matrix, &probed.matrix) < 1e-13,
                    "{scheme:?} {theta}"
                );
                let fw = probe_scheme(&c, &prev, &now, 0.1, Direction::Forward).unwrap();
                assert!(
                    transpose_residual(&closed, &fw) < 1e-13,
                    "{scheme:?} {theta}"
                );
            }
        }
    }

    #[test]
    fn direct_forward_variant_agrees_up_to_rounding() {
        let prev = toy_ops(4, 3, 3, 0.0);
        let now = toy_ops(4, 3, 5, 0.1);
        let c = cfg(SchemeKind::Hv, 0.5);
        let closed = assemble_transition_matrix(&c, &prev, &now, 0.1).unwrap();
        let p_prev = PreparedOperators::new(prev);
        let p_now = PreparedOperators::new(now.clone());
        let factors = LineFactors::new(&now, 0.05).unwrap();
        let ctx = StepContext {
            prev: &p_prev,
            now: &p_now,
            factors: &factors,
            theta: 0.5,
            dt: 0.1,
        };
        let direct = probe_transition_matrix(12, Direction::Forward, |x| {
            Ok(hv_forward(&ctx, x, ForwardVariant::Direct))
        })
        .unwrap();
        assert!(transpose_residual(&closed, &direct) < 1e-12);
    }

    #[test]
    fn implicit_euler_pure_decay() {
        let mut ops = OperatorSet::zeros(3, 3);
        for i in 0..3 {
            for j in 0..3 {
                ops.f1.weights_mut(i, j)[CENTER] = -0.03;
                ops.f2.weights_mut(i, j)[CENTER] = -0.03;
            }
        }
        let v = Field {
            values: vec![2.0; 9],
            kind: FieldKind::OptionValue,
        };
        let out = implicit_euler_step(&ops, 0.5, &v, Direction::Backward).unwrap();
        for x in out.values {
            assert!((x - 2.0 / 1.03).abs() < 1e-15);
        }
    }

    #[test]
    fn implicit_euler_adjoint_pair() {
        let ops = toy_ops(5, 4, 19, 0.0);
        let x = Field {
            values: (0..20).map(|k| (k as f64).sin()).collect(),
            kind: FieldKind::Density,
        };
        let y = Field {
            values: (0..20).map(|k| (k as f64 * 0.3).cos()).collect(),
            kind: FieldKind::OptionValue,
        };
        let fx = implicit_euler_step(&ops, 0.2, &x, Direction::Forward).unwrap();
        let by = implicit_euler_step(&ops, 0.2, &y, Direction::Backward).unwrap();
        let lhs: f64 = fx.values.iter().zip(&y.values).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.values.iter().zip(&by.values).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn heston_operators_transpose_exact() {
        let model = ModelParams::heston(0.05, 0.0, 1.5, 0.1, 0.3, 0.8, 100.0, 0.5);
        let spec = GridSpec {
            ns: 12,
            nv: 10,
            ..GridSpec::heston_experiment()
        };
        let grid = build_grid(&spec, &model, 100.0).unwrap();
        let ops = assemble(&grid, &model, 0.0, BoundaryRows::Natural).unwrap();
        for scheme in [SchemeKind::Hv, SchemeKind::Mcs] {
            let c = cfg(scheme, 0.8);
            let bk = assemble_transition_matrix(&c, &ops, &ops, 0.01).unwrap();
            let fw = probe_scheme(&c, &ops, &ops, 0.01, Direction::Forward).unwrap();
            let scale = bk.matrix.abs().max().max(1.0);
            assert!(transpose_residual(&bk, &fw) <= 1e-12 * scale);
        }
    }

    #[test]
    fn size_guard_rejects_large_systems() {
        let ops = OperatorSet::zeros(60, 50);
        let err =
            assemble_transition_matrix(&cfg(SchemeKind::Hv, 0.5), &ops, &ops, 0.1).unwrap_err();
        assert!(matches!(err, Error::SizeGuard { .. }));
    }

    #[test]
    fn rejects_bad_step() {
        let ops = OperatorSet::zeros(3, 3);
        let v = Field {
            values: vec![0.0; 9],
            kind: FieldKind::OptionValue,
        };
        assert!(hv_backward_step(&ops, &ops, 0.5, 0.0, &v).is_err());
        let w = Field {
            values: vec![0.0; 8],
            kind: FieldKind::OptionValue,
        };
        assert!(matches!(
            hv_backward_step(&ops, &ops, 0.5, 0.1, &w),
            Err(Error::GridMismatch { .. })
        ));
    }

    #[test]
    fn periodic_heat_is_stable() {
        let n = 16;
        let h = 1.0 / n as f64;
        let lap = DMatrix::from_fn(n, n, |i, j| {
            let d = (i as i64 - j as i64).rem_euclid(n as i64);
            if d == 0 {
                -2.0 / (h * h)
            } else if d == 1 || d == n as i64 - 1 {
                1.0 / (h * h)
            } else {
                0.0
            }
        });
        let zero = DMatrix::<f64>::zeros(n, n);
        let pieces = [zero.clone(), lap, zero];
        for scheme in [SchemeKind::Hv, SchemeKind::Mcs] {
            for dt in [1e-4, 1e-2, 1.0, 100.0] {
                let r = compose_dense(scheme, 0.5, dt, &pieces, &pieces).unwrap();
                let rho = r
                    .complex_eigenvalues()
                    .iter()
                    .map(|z| z.norm())
                    .fold(0.0, f64::max);
                assert!(rho <= 1.0 + 1e-8, "{dt}: {rho}");
            }
        }
    }
}
