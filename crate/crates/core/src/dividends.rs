//! Cash dividends as a shift of the spot axis.
//!
//! Backward: `V(t-, S) = V(t+, max(S - d, 0))`, evaluated by linear
//! interpolation on the spot nodes. Forward: by default the exact transpose
//! of that interpolation acting on node masses.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid2D;
use crate::model::DividendSchedule;

/// How the forward dividend operator is built.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DividendMode {
    /// Transpose of the backward interpolation; keeps forward and backward
    /// prices identical on any grid.
    #[default]
    Transpose,
    /// Direct interpolation of the density at `S + d`; equals the transpose
    /// only on uniform grids.
    Interpolated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DividendOpKind {
    Backward,
    Forward(DividendMode),
}

/// Sparse spot-axis matrix, at most two entries per row away from `S = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct DividendOperator {
    /// `(column, weight)` pairs for every spot node.
    pub rows: Vec<Vec<(usize, f64)>>,
    pub kind: DividendOpKind,
    pub d: f64,
}

/// Linear interpolation weights of `x` on `nodes`, clamped to the axis.
fn interpolation_weights(nodes: &[f64], x: f64) -> Vec<(usize, f64)> {
    let n = nodes.len();
    if x <= nodes[0] {
        return vec![(0, 1.0)];
    }
    if x >= nodes[n - 1] {
        return vec![(n - 1, 1.0)];
    }
    let k = nodes.partition_point(|&s| s <= x) - 1;
    let h = nodes[k + 1] - nodes[k];
    let w = (x - nodes[k]) / h;
    if w == 0.0 {
        vec![(k, 1.0)]
    } else {
        vec![(k, 1.0 - w), (k + 1, w)]
    }
}

fn check_amount(d: f64) -> Result<()> {
    if !(d >= 0.0 && d.is_finite()) {
        return Err(Error::InvalidDividends(format!(
            "dividend amount {d} must be nonnegative"
        )));
    }
    Ok(())
}

pub fn build_backward_dividend_op(grid: &Grid2D, d: f64) -> Result<DividendOperator> {
    check_amount(d)?;
    let s = grid.s_nodes();
    let rows = s
        .iter()
        .enumerate()
        .map(|(j, &sj)| {
            if j == 0 {
                vec![(0, 1.0)]
            } else {
                interpolation_weights(s, (sj - d).max(0.0))
            }
        })
        .collect();
    Ok(DividendOperator {
        rows,
        kind: DividendOpKind::Backward,
        d,
    })
}

fn transpose_rows(rows: &[Vec<(usize, f64)>]) -> Vec<Vec<(usize, f64)>> {
    let mut out = vec![Vec::new(); rows.len()];
    for (r, row) in rows.iter().enumerate() {
        for &(c, w) in row {
            out[c].push((r, w));
        }
    }
    out
}

pub fn build_forward_dividend_op(
    grid: &Grid2D,
    d: f64,
    mode: DividendMode,
) -> Result<DividendOperator> {
    let backward = build_backward_dividend_op(grid, d)?;
    let transposed = transpose_rows(&backward.rows);
    let rows = match mode {
        DividendMode::Transpose => transposed,
        DividendMode::Interpolated => {
            // interior rows read the density at S + d; rows at S = 0, S_max
            // and those whose shift leaves the axis follow the backward
            // boundary policy
            let s = grid.s_nodes();
            let n = s.len();
            let mut rows = transposed;
            for j in 1..n - 1 {
                if s[j] + d <= s[n - 1] {
                    rows[j] = interpolation_weights(s, s[j] + d);
                }
            }
            rows
        }
    };
    Ok(DividendOperator {
        rows,
        kind: DividendOpKind::Forward(mode),
        d,
    })
}

impl DividendOperator {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let n = self.rows.len();
        let mut m = nalgebra::DMatrix::zeros(n, n);
        for (r, row) in self.rows.iter().enumerate() {
            for &(c, w) in row {
                m[(r, c)] += w;
            }
        }
        m
    }

    /// Apply along the spot axis of a field laid out as `i * nv + j`.
    pub fn apply(&self, v: &[f64], nv: usize) -> Result<Vec<f64>> {
        let expected = self.rows.len() * nv;
        if v.len() != expected {
            return Err(Error::GridMismatch {
                expected,
                actual: v.len(),
            });
        }
        let mut out = vec![0.0; v.len()];
        for (i, row) in self.rows.iter().enumerate() {
            for j in 0..nv {
                out[i * nv + j] = row.iter().map(|&(c, w)| w * v[c * nv + j]).sum();
            }
        }
        Ok(out)
    }
}

pub fn apply_dividend(op: &DividendOperator, v: &[f64], grid: &Grid2D) -> Result<Vec<f64>> {
    if op.len() != grid.ns() {
        return Err(Error::GridMismatch {
            expected: grid.ns(),
            actual: op.len(),
        });
    }
    op.apply(v, grid.nv())
}

/// Max elementwise `|F - B^T|` between the interpolated forward operator and
/// the transpose of the backward one.
pub fn consistency_gap(grid: &Grid2D, d: f64) -> Result<f64> {
    let b = build_backward_dividend_op(grid, d)?.to_dense();
    let f = build_forward_dividend_op(grid, d, DividendMode::Interpolated)?.to_dense();
    Ok((f - b.transpose()).abs().max())
}

/// A dividend moved onto the time grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SnappedDividend {
    /// Calendar index `k` of the node `t_k = k dt`.
    pub node: usize,
    pub d: f64,
}

/// Move each ex-dividend date to the nearest calendar node, carrying the
/// amount with the riskless rate over the shift.
pub fn snap_dividends(
    schedule: &DividendSchedule,
    maturity: f64,
    n_steps: usize,
    r: f64,
) -> Result<Vec<SnappedDividend>> {
    schedule.validate(maturity)?;
    let dt = maturity / n_steps as f64;
    Ok(schedule
        .events
        .iter()
        .map(|ev| {
            let node = ((ev.t / dt).round() as usize).min(n_steps);
            let t_node = node as f64 * dt;
            SnappedDividend {
                node,
                d: ev.d * (r * (t_node - ev.t)).exp(),
            }
        })
        .collect())
}
