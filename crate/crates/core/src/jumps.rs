//! Merton jump generator on a uniform log-spot axis and its exponential.

use nalgebra::DMatrix;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::grid::Grid2D;
use crate::linalg::expm;
use crate::model::{levy_drift, Direction, JumpSpec, ModelParams};

/// Compensated jump generator acting on a contiguous block of spot nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct JumpOperator {
    pub matrix: DMatrix<f64>,
    /// Uniform log-spot nodes the matrix acts on.
    pub x_nodes: Vec<f64>,
    /// Index of the first spot node covered by `matrix`.
    pub offset: usize,
    /// Compensator drift `int (e^y - 1) nu(dy)` embedded in the matrix.
    pub compensator: f64,
}

fn uniform_step(x: &[f64]) -> Result<f64> {
    if x.len() < 3 {
        return Err(Error::InvalidGrid(
            "jump axis needs at least 3 nodes".into(),
        ));
    }
    let h = (x[x.len() - 1] - x[0]) / (x.len() - 1) as f64;
    if !(h > 0.0) || x.windows(2).any(|w| ((w[1] - w[0]) - h).abs() > 1e-9 * h) {
        return Err(Error::InvalidGrid(
            "jump operator needs a uniform log-spot axis".into(),
        ));
    }
    Ok(h)
}

/// Assemble the jump generator on the uniform nodes `x_nodes`.
///
/// Off-diagonal weights are the exact measure of the cell mapping `x_i` to
/// `x_j`; cells beyond the axis are lumped into the edge nodes. The diagonal
/// makes every row sum to zero. The compensator `-omega d/dx` is central
/// where the neighbouring jump weights keep the row Metzler and upwinded
/// otherwise.
pub fn build_jump_operator(
    jumps: &JumpSpec,
    model: &ModelParams,
    x_nodes: &[f64],
) -> Result<JumpOperator> {
    jumps.validate()?;
    let h = uniform_step(x_nodes)?;
    let n = x_nodes.len();
    let mut matrix = DMatrix::zeros(n, n);
    if jumps.lambda == 0.0 {
        return Ok(JumpOperator {
            matrix,
            x_nodes: x_nodes.to_vec(),
            offset: 0,
            compensator: 0.0,
        });
    }
    if jumps.truncation < 8.0 * jumps.sigma_j {
        return Err(Error::InvalidJumpSpec(format!(
            "truncation {} must cover at least 8 sigma_j",
            jumps.truncation
        )));
    }
    let normal = Normal::new(jumps.mu_j, jumps.sigma_j)
        .map_err(|e| Error::InvalidJumpSpec(e.to_string()))?;
    let t = jumps.truncation;
    let mass = |lo: f64, hi: f64| {
        let (lo, hi) = (lo.max(-t), hi.min(t));
        if hi <= lo {
            0.0
        } else {
            jumps.lambda * (normal.cdf(hi) - normal.cdf(lo))
        }
    };

    for i in 0..n {
        for j in 0..n {
            if j == i {
                continue;
            }
            let d = j as f64 - i as f64;
            let lo = if j == 0 {
                f64::NEG_INFINITY
            } else {
                (d - 0.5) * h
            };
            let hi = if j == n - 1 {
                f64::INFINITY
            } else {
                (d + 0.5) * h
            };
            matrix[(i, j)] = mass(lo, hi);
        }
    }

    let omega = levy_drift(model, jumps)?;
    for i in 0..n {
        let (has_lo, has_hi) = (i > 0, i + 1 < n);
        let central = has_lo && has_hi && {
            let need = omega.abs() / (2.0 * h);
            matrix[(i, i - 1)] >= need && matrix[(i, i + 1)] >= need
        };
        if central {
            matrix[(i, i - 1)] += omega / (2.0 * h);
            matrix[(i, i + 1)] -= omega / (2.0 * h);
        } else if omega > 0.0 && has_lo {
            matrix[(i, i - 1)] += omega / h;
        } else if omega < 0.0 && has_hi {
            matrix[(i, i + 1)] -= omega / h;
        }
        // otherwise the only available difference would be downwind; the
        // compensator is dropped on that edge row
    }
    for i in 0..n {
        let off: f64 = (0..n).filter(|&j| j != i).map(|j| matrix[(i, j)]).sum();
        matrix[(i, i)] = -off;
    }
    Ok(JumpOperator {
        matrix,
        x_nodes: x_nodes.to_vec(),
        offset: 0,
        compensator: omega,
    })
}

/// Jump generator on the spot axis of `grid`, which must be log-uniform
/// away from `S = 0`. The `S = 0` node is absorbing and left untouched.
pub fn jump_operator_for_grid(
    jumps: &JumpSpec,
    model: &ModelParams,
    grid: &Grid2D,
) -> Result<JumpOperator> {
    let s = grid.s_nodes();
    let offset = usize::from(s[0] == 0.0);
    let x: Vec<f64> = s[offset..].iter().map(|si| (si / model.s0).ln()).collect();
    let mut op = build_jump_operator(jumps, model, &x)?;
    op.offset = offset;
    Ok(op)
}

/// `e^{dt J}` for one step length.
#[derive(Debug, Clone, PartialEq)]
pub struct JumpExponential {
    pub matrix: DMatrix<f64>,
    pub offset: usize,
    pub dt: f64,
}

pub fn jump_exponential(op: &JumpOperator, dt: f64) -> Result<JumpExponential> {
    if !(dt >= 0.0 && dt.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "jump step {dt} must be nonnegative"
        )));
    }
    let matrix = if dt == 0.0 {
        DMatrix::identity(op.matrix.nrows(), op.matrix.ncols())
    } else {
        expm(&(&op.matrix * dt))?
    };
    Ok(JumpExponential {
        matrix,
        offset: op.offset,
        dt,
    })
}

impl JumpExponential {
    /// Apply to every variance row of a field laid out as `i * nv + j`;
    /// the forward direction applies the transpose.
    pub fn apply(&self, v: &[f64], nv: usize, direction: Direction) -> Vec<f64> {
        let n = self.matrix.nrows();
        let mut out = v.to_vec();
        let mut line = vec![0.0; n];
        for j in 0..nv {
            for (k, l) in line.iter_mut().enumerate() {
                *l = v[(self.offset + k) * nv + j];
            }
            for r in 0..n {
                let mut acc = 0.0;
                for (c, l) in line.iter().enumerate() {
                    acc += match direction {
                        Direction::Backward => self.matrix[(r, c)],
                        Direction::Forward => self.matrix[(c, r)],
                    } * l;
                }
                out[(self.offset + r) * nv + j] = acc;
            }
        }
        out
    }
}

pub fn apply_jump_exponential(
    op: &JumpOperator,
    dt: f64,
    v: &[f64],
    nv: usize,
    direction: Direction,
) -> Result<Vec<f64>> {
    let expected = (op.offset + op.matrix.nrows()) * nv;
    if v.len() != expected {
        return Err(Error::GridMismatch {
            expected,
            actual: v.len(),
        });
    }
    Ok(jump_exponential(op, dt)?.apply(v, nv, direction))
}

/// Three-stage Strang composition `second(jump(first(v)))`.
///
/// Backward: `first` and `second` are the two diffusion half-steps. Forward:
/// pass the transposed stages in reverse order so the composite is the
/// transpose of the backward one.
pub fn strang_composite_step<A, J, B>(first: A, jump: J, second: B, v: &[f64]) -> Result<Vec<f64>>
where
    A: FnOnce(&[f64]) -> Result<Vec<f64>>,
    J: FnOnce(&[f64]) -> Result<Vec<f64>>,
    B: FnOnce(&[f64]) -> Result<Vec<f64>>,
{
    let a = first(v)?;
    let b = jump(&a)?;
    second(&b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_grid, GridSpec, SpotGridKind};

    fn model() -> ModelParams {
        ModelParams::heston(0.05, 0.0, 1.5, 0.1, 0.3, 0.0, 100.0, 0.5)
    }

    fn merton(lambda: f64, mu_j: f64) -> JumpSpec {
        JumpSpec {
            lambda,
            mu_j,
            sigma_j: 0.25,
            truncation: 2.5,
        }
    }

    fn axis(half_width: f64, h: f64) -> Vec<f64> {
        let m = (half_width / h).round() as i64;
        (-m..=m).map(|k| k as f64 * h).collect()
    }

    #[test]
    fn zero_intensity_is_zero_matrix() {
        let op = build_jump_operator(&merton(0.0, 0.0), &model(), &axis(1.0, 0.1)).unwrap();
        assert_eq!(op.matrix, DMatrix::zeros(21, 21));
    }

    #[test]
    fn annihilates_constants_and_is_metzler() {
        let j = merton(0.5, 0.0);
        let op = build_jump_operator(&j, &model(), &axis(3.0, 0.05)).unwrap();
        let n = op.matrix.nrows();
        for i in 0..n {
            let row: f64 = op.matrix.row(i).sum();
            assert!(row.abs() <= 1e-8 * j.lambda, "{row}");
            for c in 0..n {
                if c != i {
                    assert!(op.matrix[(i, c)] >= 0.0);
                }
            }
        }
    }

    fn exp_residual(j: &JumpSpec, h: f64) -> f64 {
        let x = axis(4.0, h);
        let op = build_jump_operator(j, &model(), &x).unwrap();
        let e: Vec<f64> = x.iter().map(|xi| xi.exp()).collect();
        let je = &op.matrix * nalgebra::DVector::from_vec(e);
        x.iter()
            .enumerate()
            .filter(|(_, xi)| xi.abs() <= 1.0)
            .map(|(i, _)| je[i].abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn exponential_martingale_second_order_with_central_compensator() {
        // mean chosen so the compensator vanishes and the central rule applies
        let j = merton(0.5, -0.5 * 0.25 * 0.25);
        let coarse = exp_residual(&j, 0.04);
        let fine = exp_residual(&j, 0.02);
        let ratio = coarse / fine;
        assert!((3.5..=4.5).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn exponential_martingale_converges_with_upwind_compensator() {
        let j = merton(0.5, 0.0);
        let errs: Vec<f64> = [0.04, 0.02, 0.01]
            .iter()
            .map(|&h| exp_residual(&j, h))
            .collect();
        assert!(
            errs[0] / errs[1] > 1.8 && errs[1] / errs[2] > 1.8,
            "{errs:?}"
        );
    }

    #[test]
    fn rejects_nonuniform_axis() {
        let x = vec![0.0, 0.1, 0.3, 0.4];
        assert!(matches!(
            build_jump_operator(&merton(0.5, 0.0), &model(), &x),
            Err(Error::InvalidGrid(_))
        ));
    }

    #[test]
    fn exponential_properties() {
        let j = merton(0.5, 0.0);
        let op = build_jump_operator(&j, &model(), &axis(2.0, 0.1)).unwrap();
        let n = op.matrix.nrows();
        let zero = jump_exponential(&op, 0.0).unwrap();
        assert_eq!(zero.matrix, DMatrix::identity(n, n));

        let e = jump_exponential(&op, 0.25).unwrap();
        assert!(e.matrix.iter().all(|&x| x >= -1e-15));
        let et = expm(&(op.matrix.transpose() * 0.25)).unwrap();
        assert!((&e.matrix.transpose() - et).abs().max() <= 1e-12);

        // mass conservation of the transposed action
        let p: Vec<f64> = (0..n)
            .map(|k| (-((k as f64 - 20.0) / 4.0).powi(2)).exp())
            .collect();
        let fw = e.apply(&p, 1, Direction::Forward);
        let before: f64 = p.iter().sum();
        let after: f64 = fw.iter().sum();
        assert!((before - after).abs() < 1e-10);
    }

    #[test]
    fn first_order_in_dt() {
        let op = build_jump_operator(&merton(0.5, 0.0), &model(), &axis(2.0, 0.1)).unwrap();
        let n = op.matrix.nrows();
        let v: Vec<f64> = (0..n).map(|k| (k as f64 * 0.3).sin() + 2.0).collect();
        let err = |dt: f64| {
            let e = apply_jump_exponential(&op, dt, &v, 1, Direction::Backward).unwrap();
            let jv = &op.matrix * nalgebra::DVector::from_column_slice(&v);
            (0..n)
                .map(|k| (e[k] - v[k] - dt * jv[k]).abs())
                .fold(0.0, f64::max)
        };
        let ratio = err(0.1) / err(0.05);
        assert!((3.6..=4.4).contains(&ratio), "{ratio}");
    }

    #[test]
    fn grid_operator_skips_origin() {
        let spec = GridSpec {
            ns: 41,
            nv: 5,
            s_max_mult: 4.0,
            v_max_mult: 4.0,
            condense_points: vec![],
            condense_strength: 0.0,
            kind: SpotGridKind::LogUniform { s_min: 10.0 },
        };
        let grid = build_grid(&spec, &model(), 100.0).unwrap();
        let op = jump_operator_for_grid(&merton(0.5, 0.0), &model(), &grid).unwrap();
        assert_eq!(op.offset, 1);
        assert_eq!(op.matrix.nrows(), 40);
        let v: Vec<f64> = (0..grid.len()).map(|k| k as f64).collect();
        let out = apply_jump_exponential(&op, 0.1, &v, 5, Direction::Backward).unwrap();
        assert_eq!(&out[..5], &v[..5]);
    }

    #[test]
    fn strang_with_identity_jump_is_two_half_steps() {
        let half =
            |x: &[f64]| -> Result<Vec<f64>> { Ok(x.iter().map(|v| 0.9 * v + 1.0).collect()) };
        let v = vec![1.0, 2.0];
        let out = strang_composite_step(half, |x| Ok(x.to_vec()), half, &v).unwrap();
        assert_eq!(out, half(&half(&v).unwrap()).unwrap());
    }

    /// Toy 1D diffusion-convection-reaction generator on the same axis.
    fn toy_diffusion(n: usize, h: f64) -> DMatrix<f64> {
        let (a, b, r) = (0.08, 0.03, 0.05);
        let mut d = DMatrix::zeros(n, n);
        for i in 0..n {
            d[(i, i)] = -r;
            if i > 0 && i + 1 < n {
                d[(i, i - 1)] += a / (h * h) - b / (2.0 * h);
                d[(i, i)] += -2.0 * a / (h * h);
                d[(i, i + 1)] += a / (h * h) + b / (2.0 * h);
            }
        }
        d
    }

    #[test]
    fn strang_second_order_against_dense_exponential() {
        let x: Vec<f64> = (0..40).map(|k| (k as f64 - 19.5) * 0.1).collect();
        let op = build_jump_operator(&merton(0.5, 0.0), &model(), &x).unwrap();
        let d = toy_diffusion(40, 0.1);
        let v0 = nalgebra::DVector::from_fn(40, |k, _| (x[k].exp() - 1.0).max(0.0));
        let t = 1.0;
        let exact = expm(&((&d + &op.matrix) * t)).unwrap() * &v0;
        let err = |n: usize| {
            let dt = t / n as f64;
            let half = expm(&(&d * (0.5 * dt))).unwrap();
            let jump = jump_exponential(&op, dt).unwrap();
            let mut v: Vec<f64> = v0.as_slice().to_vec();
            for _ in 0..n {
                v = strang_composite_step(
                    |x| {
                        Ok((&half * nalgebra::DVector::from_column_slice(x))
                            .as_slice()
                            .to_vec())
                    },
                    |x| Ok(jump.apply(x, 1, Direction::Backward)),
                    |x| {
                        Ok((&half * nalgebra::DVector::from_column_slice(x))
                            .as_slice()
                            .to_vec())
                    },
                    &v,
                )
                .unwrap();
            }
            (0..40).map(|k| (v[k] - exact[k]).abs()).fold(0.0, f64::max)
        };
        let (e1, e2, e3) = (err(4), err(8), err(16));
        assert!(e1 / e2 >= 3.5 && e2 / e3 >= 3.5, "{e1} {e2} {e3}");
    }
}
