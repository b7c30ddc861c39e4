//! Semi-discrete diffusion generator `F = F0 + F1 + F2` on a [`Grid2D`].
//!
//! `F1` carries the spot-direction terms, `F2` the variance-direction terms
//! and `F0` the mixed derivative. All three are stored as 3x3 stencils per
//! node, which makes exact transposition a pure re-indexing of the same
//! coefficients.

use std::io::Write;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::grid::Grid2D;
use crate::model::ModelParams;

/// Stencil slot for offset `(di, dj)` in `{-1, 0, 1}^2`.
#[inline]
pub const fn slot(di: i32, dj: i32) -> usize {
    ((di + 1) * 3 + (dj + 1)) as usize
}

pub const CENTER: usize = slot(0, 0);
const OFFSETS: [(i32, i32); 9] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 0),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

/// Sparse matrix over an `ns x nv` grid coupling each node with its eight
/// neighbours at most.
#[derive(Debug, Clone, PartialEq)]
pub struct StencilMatrix {
    ns: usize,
    nv: usize,
    weights: Vec<[f64; 9]>,
}

impl StencilMatrix {
    pub fn zeros(ns: usize, nv: usize) -> Self {
        StencilMatrix {
            ns,
            nv,
            weights: vec![[0.0; 9]; ns * nv],
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.ns, self.nv)
    }

    pub fn len(&self) -> usize {
        self.ns * self.nv
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    #[inline]
    pub fn weights(&self, i: usize, j: usize) -> &[f64; 9] {
        &self.weights[i * self.nv + j]
    }

    #[inline]
    pub fn weights_mut(&mut self, i: usize, j: usize) -> &mut [f64; 9] {
        &mut self.weights[i * self.nv + j]
    }

    #[inline]
    fn neighbour(&self, i: usize, j: usize, k: usize) -> Option<usize> {
        let (di, dj) = OFFSETS[k];
        let ii = i as i64 + di as i64;
        let jj = j as i64 + dj as i64;
        if ii < 0 || jj < 0 || ii >= self.ns as i64 || jj >= self.nv as i64 {
            None
        } else {
            Some(ii as usize * self.nv + jj as usize)
        }
    }

    /// `y += alpha * A x`.
    pub fn apply_add(&self, alpha: f64, x: &[f64], y: &mut [f64]) {
        let nv = self.nv;
        for i in 0..self.ns {
            for j in 0..nv {
                let w = &self.weights[i * nv + j];
                let mut acc = 0.0;
                for (k, wk) in w.iter().enumerate() {
                    if *wk != 0.0 {
                        if let Some(p) = self.neighbour(i, j, k) {
                            acc += wk * x[p];
                        }
                    }
                }
                y[i * nv + j] += alpha * acc;
            }
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; x.len()];
        self.apply_add(1.0, x, &mut y);
        y
    }

    /// Exact transpose: the weight of `p -> q` becomes the weight of `q -> p`.
    pub fn transpose(&self) -> StencilMatrix {
        let mut out = StencilMatrix::zeros(self.ns, self.nv);
        for i in 0..self.ns {
            for j in 0..self.nv {
                for k in 0..9 {
                    if let Some(p) = self.neighbour(i, j, k) {
                        out.weights[p][8 - k] = self.weights[i * self.nv + j][k];
                    }
                }
            }
        }
        out
    }

    pub fn add_scaled(&mut self, alpha: f64, other: &StencilMatrix) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            for k in 0..9 {
                a[k] += alpha * b[k];
            }
        }
    }

    /// Zero every entry in grid row `(i, j)`.
    pub fn clear_row(&mut self, i: usize, j: usize) {
        self.weights[i * self.nv + j] = [0.0; 9];
    }

    /// Nonzero entries as `(row, col, value)`.
    pub fn triplets(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::new();
        for i in 0..self.ns {
            for j in 0..self.nv {
                let row = i * self.nv + j;
                for k in 0..9 {
                    let w = self.weights[row][k];
                    if w != 0.0 {
                        if let Some(col) = self.neighbour(i, j, k) {
                            out.push((row, col, w));
                        }
                    }
                }
            }
        }
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.len();
        let mut m = DMatrix::zeros(n, n);
        for (r, c, w) in self.triplets() {
            m[(r, c)] += w;
        }
        m
    }

    /// Coordinate text format, one `row col value` per line.
    pub fn write_coo<W: Write>(&self, mut out: W) -> Result<()> {
        for (r, c, w) in self.triplets() {
            writeln!(out, "{r} {c} {w:.17e}")?;
        }
        Ok(())
    }

    /// Tridiagonal coefficients along the spot axis for variance index `j`:
    /// `(sub, diag, super)`.
    pub fn spot_line(&self, j: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let n = self.ns;
        let mut a = vec![0.0; n];
        let mut b = vec![0.0; n];
        let mut c = vec![0.0; n];
        for i in 0..n {
            let w = self.weights(i, j);
            a[i] = w[slot(-1, 0)];
            b[i] = w[CENTER];
            c[i] = w[slot(1, 0)];
        }
        (a, b, c)
    }

    /// Tridiagonal coefficients along the variance axis for spot index `i`.
    pub fn variance_line(&self, i: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let n = self.nv;
        let mut a = vec![0.0; n];
        let mut b = vec![0.0; n];
        let mut c = vec![0.0; n];
        for j in 0..n {
            let w = self.weights(i, j);
            a[j] = w[slot(0, -1)];
            b[j] = w[CENTER];
            c[j] = w[slot(0, 1)];
        }
        (a, b, c)
    }

    /// True if only the slots in `allowed` carry nonzero weights.
    pub fn uses_only(&self, allowed: &[usize]) -> bool {
        self.weights
            .iter()
            .all(|w| (0..9).all(|k| w[k] == 0.0 || allowed.contains(&k)))
    }
}

/// Three-point weights `[lower, centre, upper]` for `a d2/dx2 + b d/dx` on
/// the nonuniform stencil `(x - h_minus, x, x + h_plus)`.
///
/// The drift is centred when that keeps both neighbour weights nonnegative
/// and upwinded otherwise.
pub fn convection_diffusion_weights(a: f64, b: f64, h_minus: f64, h_plus: f64) -> [f64; 3] {
    convection_diffusion_weights_with_offset(a, b, h_minus, h_plus, [0.0, 0.0])
}

/// As [`convection_diffusion_weights`], with `offset` (the mixed stencil's
/// weights on the same two neighbours) taken into account: the drift is
/// also upwinded where the centred weights plus `offset` would go negative
/// but the upwinded ones would not.
pub fn convection_diffusion_weights_with_offset(
    a: f64,
    b: f64,
    h_minus: f64,
    h_plus: f64,
    offset: [f64; 2],
) -> [f64; 3] {
    let sum = h_minus + h_plus;
    let diffusion = [
        2.0 * a / (h_minus * sum),
        -2.0 * a / (h_minus * h_plus),
        2.0 * a / (h_plus * sum),
    ];
    let central = [
        diffusion[0] - b * h_plus / (h_minus * sum),
        diffusion[1] + b * (h_plus - h_minus) / (h_minus * h_plus),
        diffusion[2] + b * h_minus / (h_plus * sum),
    ];
    let mut upwind = diffusion;
    if b > 0.0 {
        upwind[1] -= b / h_plus;
        upwind[2] += b / h_plus;
    } else {
        upwind[0] -= b / h_minus;
        upwind[1] += b / h_minus;
    }
    let nonnegative = |w: &[f64; 3], off: [f64; 2]| w[0] + off[0] >= 0.0 && w[2] + off[1] >= 0.0;
    let peclet = nonnegative(&central, [0.0, 0.0]);
    // upwind only where that actually restores the sign pattern; rows the
    // mixed term already spoils keep the 1D choice
    if peclet && nonnegative(&central, offset) {
        central
    } else if nonnegative(&upwind, offset) || !peclet {
        upwind
    } else {
        central
    }
}

/// Seven-point weights for `coeff * d2/(dS dv)`, laid out as a 3x3 stencil.
///
/// `steps = [h_s_minus, h_s_plus, h_v_minus, h_v_plus]`. With a positive
/// `orientation` the corners `(+1, +1)` and `(-1, -1)` are used, otherwise
/// `(+1, -1)` and `(-1, +1)`. Choosing `orientation = sign(coeff)` makes the
/// corner weights nonnegative, leaving only the axis neighbours to be
/// dominated by the one-dimensional diffusion terms.
pub fn mixed_stencil_weights(orientation: f64, steps: [f64; 4], coeff: f64) -> [f64; 9] {
    let mut w = [0.0; 9];
    if coeff == 0.0 {
        return w;
    }
    let [hsm, hsp, hvm, hvp] = steps;
    if orientation >= 0.0 {
        let up = coeff / (2.0 * hsp * hvp);
        let down = coeff / (2.0 * hsm * hvm);
        w[slot(1, 1)] = up;
        w[slot(1, 0)] = -up;
        w[slot(0, 1)] = -up;
        w[CENTER] = up + down;
        w[slot(-1, 0)] = -down;
        w[slot(0, -1)] = -down;
        w[slot(-1, -1)] = down;
    } else {
        let right = coeff / (2.0 * hsp * hvm);
        let left = coeff / (2.0 * hsm * hvp);
        w[slot(1, 0)] = right;
        w[slot(1, -1)] = -right;
        w[slot(0, -1)] = right;
        w[CENTER] = -right - left;
        w[slot(0, 1)] = left;
        w[slot(-1, 1)] = -left;
        w[slot(-1, 0)] = left;
    }
    w
}

/// Boundary rows used when assembling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundaryRows {
    /// The degenerate PDE at `S = 0` and `v = 0`, one-sided first-order
    /// closures at `S_max` and `v_max`.
    Natural,
    /// As `Natural`, but the `S = 0` rows are zero so values there stay pinned
    /// at their payoff.
    PinnedLowerSpot,
}

/// The three split pieces of the generator, frozen at time `t_label`.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorSet {
    pub f0: StencilMatrix,
    pub f1: StencilMatrix,
    pub f2: StencilMatrix,
    pub t_label: f64,
    pub transposed: bool,
    /// Interior nodes where `F` has a negative off-diagonal weight.
    pub positivity_violations: usize,
}

impl OperatorSet {
    pub fn zeros(ns: usize, nv: usize) -> Self {
        OperatorSet {
            f0: StencilMatrix::zeros(ns, nv),
            f1: StencilMatrix::zeros(ns, nv),
            f2: StencilMatrix::zeros(ns, nv),
            t_label: 0.0,
            transposed: false,
            positivity_violations: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.f0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.f0.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.f0.dims()
    }

    /// `y += alpha * (F0 + F1 + F2) x`.
    pub fn apply_full_add(&self, alpha: f64, x: &[f64], y: &mut [f64]) {
        self.f0.apply_add(alpha, x, y);
        self.f1.apply_add(alpha, x, y);
        self.f2.apply_add(alpha, x, y);
    }

    pub fn apply_full(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; x.len()];
        self.apply_full_add(1.0, x, &mut y);
        y
    }

    /// `F0 + F1 + F2` as a single stencil.
    pub fn combined(&self) -> StencilMatrix {
        let mut f = self.f0.clone();
        f.add_scaled(1.0, &self.f1);
        f.add_scaled(1.0, &self.f2);
        f
    }

    pub fn to_dense(&self) -> [DMatrix<f64>; 3] {
        [self.f0.to_dense(), self.f1.to_dense(), self.f2.to_dense()]
    }
}

pub fn transpose(ops: &OperatorSet) -> OperatorSet {
    OperatorSet {
        f0: ops.f0.transpose(),
        f1: ops.f1.transpose(),
        f2: ops.f2.transpose(),
        t_label: ops.t_label,
        transposed: !ops.transposed,
        positivity_violations: ops.positivity_violations,
    }
}

fn count_metzler_violations(f0: &StencilMatrix, f1: &StencilMatrix, f2: &StencilMatrix) -> usize {
    let (ns, nv) = f0.dims();
    let mut count = 0;
    for i in 1..ns.saturating_sub(1) {
        for j in 1..nv.saturating_sub(1) {
            let bad = (0..9).filter(|&k| k != CENTER).any(|k| {
                let w = f0.weights(i, j)[k] + f1.weights(i, j)[k] + f2.weights(i, j)[k];
                w < -1e-12 * (1.0 + f1.weights(i, j)[CENTER].abs() + f2.weights(i, j)[CENTER].abs())
            });
            if bad {
                count += 1;
            }
        }
    }
    count
}

/// Assemble `F0`, `F1`, `F2` at calendar time `t`.
pub fn assemble(
    grid: &Grid2D,
    model: &ModelParams,
    t: f64,
    rows: BoundaryRows,
) -> Result<OperatorSet> {
    model.validate()?;
    let s = grid.s_nodes();
    let v = grid.v_nodes();
    if s.windows(2).any(|w| w[1] <= w[0]) || v.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidGrid("grid is not strictly increasing".into()));
    }
    let (ns, nv) = (grid.ns(), grid.nv());
    let mut f0 = StencilMatrix::zeros(ns, nv);
    let mut f1 = StencilMatrix::zeros(ns, nv);
    let mut f2 = StencilMatrix::zeros(ns, nv);
    let half_r = 0.5 * model.r;

    for i in 0..ns {
        for j in 0..nv {
            if rows == BoundaryRows::PinnedLowerSpot && i == 0 {
                continue;
            }
            let (si, vj) = (s[i], v[j]);
            let phi = model.local_vol(si, t);

            // mixed derivative, interior only
            if i > 0 && i + 1 < ns && j > 0 && j + 1 < nv {
                let coeff = model.rho * model.xi * phi * si * vj.powf(model.beta + 0.5);
                if coeff != 0.0 {
                    let steps = [si - s[i - 1], s[i + 1] - si, vj - v[j - 1], v[j + 1] - vj];
                    *f0.weights_mut(i, j) = mixed_stencil_weights(coeff.signum(), steps, coeff);
                }
            }

            // spot direction
            let w1 = f1.weights_mut(i, j);
            w1[CENTER] -= half_r;
            let drift_s = (model.r - model.q) * si;
            if i + 1 == ns {
                let hm = si - s[i - 1];
                w1[slot(-1, 0)] -= drift_s / hm;
                w1[CENTER] += drift_s / hm;
            } else if i > 0 {
                let diff_s = 0.5 * vj * phi * phi * si * si;
                let cross = f0.weights(i, j);
                let offset = [cross[slot(-1, 0)], cross[slot(1, 0)]];
                let w = convection_diffusion_weights_with_offset(
                    diff_s,
                    drift_s,
                    si - s[i - 1],
                    s[i + 1] - si,
                    offset,
                );
                w1[slot(-1, 0)] += w[0];
                w1[CENTER] += w[1];
                w1[slot(1, 0)] += w[2];
            }

            // variance direction
            let w2 = f2.weights_mut(i, j);
            w2[CENTER] -= half_r;
            let drift_v = model.kappa * (model.v_inf - vj);
            if j == 0 {
                let hp = v[1] - vj;
                if drift_v >= 0.0 {
                    w2[slot(0, 1)] += drift_v / hp;
                    w2[CENTER] -= drift_v / hp;
                }
            } else if j + 1 == nv {
                let hm = vj - v[j - 1];
                w2[slot(0, -1)] -= drift_v / hm;
                w2[CENTER] += drift_v / hm;
            } else {
                let diff_v = 0.5 * model.xi * model.xi * vj.powf(2.0 * model.beta);
                let cross = f0.weights(i, j);
                let offset = [cross[slot(0, -1)], cross[slot(0, 1)]];
                let w = convection_diffusion_weights_with_offset(
                    diff_v,
                    drift_v,
                    vj - v[j - 1],
                    v[j + 1] - vj,
                    offset,
                );
                w2[slot(0, -1)] += w[0];
                w2[CENTER] += w[1];
                w2[slot(0, 1)] += w[2];
            }
        }
    }
    let positivity_violations = count_metzler_violations(&f0, &f1, &f2);
    Ok(OperatorSet {
        f0,
        f1,
        f2,
        t_label: t,
        transposed: false,
        positivity_violations,
    })
}

/// Sign and dominance diagnostics of a square matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MMatrixReport {
    pub positive_diagonal: bool,
    pub nonpositive_off_diagonal: bool,
    pub diagonally_dominant: bool,
    pub strictly_dominant_rows: usize,
    pub is_m_matrix: bool,
}

/// Z-matrix sign pattern plus weak row dominance with at least one strictly
/// dominant row.
pub fn check_m_matrix(n: usize, triplets: &[(usize, usize, f64)]) -> MMatrixReport {
    let mut diag = vec![0.0; n];
    let mut off_sum = vec![0.0; n];
    let mut nonpositive_off_diagonal = true;
    for &(r, c, w) in triplets {
        if r == c {
            diag[r] += w;
        } else {
            if w > 0.0 {
                nonpositive_off_diagonal = false;
            }
            off_sum[r] += w.abs();
        }
    }
    let positive_diagonal = diag.iter().all(|&d| d > 0.0);
    let tol = |d: f64| 1e-14 * d.abs().max(1.0);
    let diagonally_dominant = (0..n).all(|k| diag[k] + tol(diag[k]) >= off_sum[k]);
    let strictly_dominant_rows = (0..n)
        .filter(|&k| diag[k] > off_sum[k] + tol(diag[k]))
        .count();
    MMatrixReport {
        positive_diagonal,
        nonpositive_off_diagonal,
        diagonally_dominant,
        strictly_dominant_rows,
        is_m_matrix: positive_diagonal
            && nonpositive_off_diagonal
            && diagonally_dominant
            && strictly_dominant_rows > 0,
    }
}

pub fn check_m_matrix_dense(m: &DMatrix<f64>) -> MMatrixReport {
    let mut t = Vec::new();
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            if m[(r, c)] != 0.0 {
                t.push((r, c, m[(r, c)]));
            }
        }
    }
    check_m_matrix(m.nrows(), &t)
}

/// `I - alpha * A` as triplets.
pub fn identity_minus(alpha: f64, a: &StencilMatrix) -> Vec<(usize, usize, f64)> {
    let mut t: Vec<(usize, usize, f64)> = a
        .triplets()
        .into_iter()
        .map(|(r, c, w)| (r, c, -alpha * w))
        .collect();
    t.extend((0..a.len()).map(|k| (k, k, 1.0)));
    t
}
