//! Spatial grids, payoff discretization and the discrete Dirac density.
//!
//! Fields are stored row-major over `(i_s, i_v)`: node `(i, j)` lives at
//! index `i * nv + j`, so variance is the contiguous axis.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::quad::gauss_legendre_5;

/// How the spot axis is laid out.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SpotGridKind {
    /// Sinh-type clustering around the condensing points.
    #[default]
    Sinh,
    /// `{0} ∪ {S0 e^{kh}}`: uniform in log-spot away from the origin, as
    /// required when the jump stage is active.
    LogUniform { s_min: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub ns: usize,
    pub nv: usize,
    /// `s_max = s_max_mult * max(S0, K)`.
    pub s_max_mult: f64,
    /// `v_max = v_max_mult * v0`.
    pub v_max_mult: f64,
    /// Points where the spot grid condenses; empty means `{S0, K}`.
    #[serde(default)]
    pub condense_points: Vec<f64>,
    /// Clustering intensity; the sinh width parameter is `max(S0, K) / strength`.
    /// Zero gives a uniform grid.
    #[serde(default = "default_strength")]
    pub condense_strength: f64,
    #[serde(default)]
    pub kind: SpotGridKind,
}

fn default_strength() -> f64 {
    5.0
}

impl GridSpec {
    /// Grid of the benchmark Heston experiments: 76 spot nodes on
    /// `[0, 40 max(S0, K)]`, 79 variance nodes on `[0, 6 v0]`.
    pub fn heston_experiment() -> Self {
        GridSpec {
            ns: 76,
            nv: 79,
            s_max_mult: 40.0,
            v_max_mult: 6.0,
            condense_points: Vec::new(),
            condense_strength: default_strength(),
            kind: SpotGridKind::Sinh,
        }
    }
}

/// Tensor grid in `(S, v)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid2D {
    s_nodes: Vec<f64>,
    v_nodes: Vec<f64>,
    s_cell_widths: Vec<f64>,
    v_cell_widths: Vec<f64>,
}

fn cell_widths(nodes: &[f64]) -> Vec<f64> {
    let n = nodes.len();
    (0..n)
        .map(|i| {
            let lo = if i == 0 {
                nodes[0]
            } else {
                0.5 * (nodes[i - 1] + nodes[i])
            };
            let hi = if i + 1 == n {
                nodes[n - 1]
            } else {
                0.5 * (nodes[i] + nodes[i + 1])
            };
            hi - lo
        })
        .collect()
}

fn check_increasing(nodes: &[f64], axis: &str) -> Result<()> {
    if nodes.len() < 2 {
        return Err(Error::InvalidGrid(format!(
            "{axis}-axis needs at least two nodes"
        )));
    }
    if nodes.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidGrid(format!(
            "{axis}-axis has non-finite nodes"
        )));
    }
    if nodes.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidGrid(format!(
            "{axis}-axis is not strictly increasing"
        )));
    }
    Ok(())
}

impl Grid2D {
    pub fn from_nodes(s_nodes: Vec<f64>, v_nodes: Vec<f64>) -> Result<Self> {
        check_increasing(&s_nodes, "S")?;
        check_increasing(&v_nodes, "v")?;
        let s_cell_widths = cell_widths(&s_nodes);
        let v_cell_widths = cell_widths(&v_nodes);
        Ok(Grid2D {
            s_nodes,
            v_nodes,
            s_cell_widths,
            v_cell_widths,
        })
    }

    pub fn uniform(ns: usize, s_max: f64, nv: usize, v_max: f64) -> Result<Self> {
        let s = (0..ns)
            .map(|i| s_max * i as f64 / (ns - 1) as f64)
            .collect();
        let v = (0..nv)
            .map(|j| v_max * j as f64 / (nv - 1) as f64)
            .collect();
        Self::from_nodes(s, v)
    }

    pub fn ns(&self) -> usize {
        self.s_nodes.len()
    }
    pub fn nv(&self) -> usize {
        self.v_nodes.len()
    }
    pub fn len(&self) -> usize {
        self.ns() * self.nv()
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
    pub fn s_nodes(&self) -> &[f64] {
        &self.s_nodes
    }
    pub fn v_nodes(&self) -> &[f64] {
        &self.v_nodes
    }
    pub fn s_cell_widths(&self) -> &[f64] {
        &self.s_cell_widths
    }
    pub fn v_cell_widths(&self) -> &[f64] {
        &self.v_cell_widths
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        i * self.nv() + j
    }

    pub fn cell_area(&self, i: usize, j: usize) -> f64 {
        self.s_cell_widths[i] * self.v_cell_widths[j]
    }

    /// Index of a node that coincides with `x` (relative tolerance 1e-12).
    pub fn find_node(nodes: &[f64], x: f64) -> Option<usize> {
        let tol = 1e-12 * x.abs().max(1.0);
        nodes.iter().position(|&n| (n - x).abs() <= tol)
    }

    /// Node of `(S0, v0)`.
    pub fn spot_node(&self, model: &ModelParams) -> Result<(usize, usize)> {
        let i = Self::find_node(&self.s_nodes, model.s0)
            .ok_or_else(|| Error::InvalidGrid(format!("S0 = {} is not a grid node", model.s0)))?;
        let j = Self::find_node(&self.v_nodes, model.v0)
            .ok_or_else(|| Error::InvalidGrid(format!("v0 = {} is not a grid node", model.v0)))?;
        Ok((i, j))
    }

    /// Step between consecutive spot nodes `S_{i+1} - S_i`.
    pub fn s_steps(&self) -> Vec<f64> {
        self.s_nodes.windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// Write one node per line: `axis,index,value`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "axis,index,value")?;
        for (i, s) in self.s_nodes.iter().enumerate() {
            writeln!(out, "S,{i},{s:.12}")?;
        }
        for (j, v) in self.v_nodes.iter().enumerate() {
            writeln!(out, "v,{j},{v:.12}")?;
        }
        Ok(())
    }
}

/// Spot axis clustered around `points` with width `alpha`.
///
/// The node density is proportional to `sqrt(sum_k 1 / (alpha^2 + (S - p_k)^2))`,
/// which reduces to the classical `asinh` map for a single point.
fn sinh_axis(n: usize, s_max: f64, points: &[f64], alpha: f64) -> Vec<f64> {
    if !alpha.is_finite() {
        return (0..n).map(|i| s_max * i as f64 / (n - 1) as f64).collect();
    }
    if points.len() == 1 {
        let p = points[0];
        let lo = (-p / alpha).asinh();
        let hi = ((s_max - p) / alpha).asinh();
        let mut nodes: Vec<f64> = (0..n)
            .map(|i| {
                let u = i as f64 / (n - 1) as f64;
                p + alpha * (lo + u * (hi - lo)).sinh()
            })
            .collect();
        nodes[0] = 0.0;
        nodes[n - 1] = s_max;
        return nodes;
    }
    let density = |s: f64| {
        points
            .iter()
            .map(|p| 1.0 / (alpha * alpha + (s - p) * (s - p)))
            .sum::<f64>()
            .sqrt()
    };
    // cumulative density on a fine table, then invert by linear interpolation
    let m = 1 << 16;
    let h = s_max / m as f64;
    let mut cum = vec![0.0; m + 1];
    for k in 0..m {
        let a = h * k as f64;
        cum[k + 1] = cum[k] + gauss_legendre_5(&density, a, a + h);
    }
    let total = cum[m];
    let mut nodes = Vec::with_capacity(n);
    let mut k = 0;
    for i in 0..n {
        let target = total * i as f64 / (n - 1) as f64;
        while k < m - 1 && cum[k + 1] < target {
            k += 1;
        }
        let w = ((target - cum[k]) / (cum[k + 1] - cum[k])).clamp(0.0, 1.0);
        nodes.push(h * (k as f64 + w));
    }
    nodes[0] = 0.0;
    nodes[n - 1] = s_max;
    nodes
}

fn log_uniform_axis(n: usize, s_min: f64, s_max: f64, s0: f64) -> Result<Vec<f64>> {
    if !(s_min > 0.0 && s_min < s0 && s0 < s_max) {
        return Err(Error::InvalidGrid(format!(
            "log-uniform axis needs 0 < s_min < S0 < s_max, got {s_min}, {s0}, {s_max}"
        )));
    }
    let m = n - 1;
    let h = (s_max / s_min).ln() / (m - 1) as f64;
    let k0 = ((s0 / s_min).ln() / h).round() as i64;
    let mut nodes = vec![0.0];
    for k in 0..m as i64 {
        nodes.push(s0 * ((k - k0) as f64 * h).exp());
    }
    Ok(nodes)
}

/// Move the interior node nearest to `x` onto `x`.
fn snap_node(nodes: &mut [f64], x: f64) {
    let n = nodes.len();
    let (k, _) = nodes
        .iter()
        .enumerate()
        .skip(1)
        .take(n - 2)
        .map(|(k, s)| (k, (s - x).abs()))
        .fold(
            (1, f64::INFINITY),
            |acc, c| if c.1 < acc.1 { c } else { acc },
        );
    nodes[k] = x;
}

pub fn build_grid(spec: &GridSpec, model: &ModelParams, strike: f64) -> Result<Grid2D> {
    if spec.ns < 4 || spec.nv < 4 {
        return Err(Error::InvalidGrid(format!(
            "need at least 4 nodes per axis, got {} x {}",
            spec.ns, spec.nv
        )));
    }
    if !(spec.s_max_mult > 1.0 && spec.v_max_mult > 1.0) {
        return Err(Error::InvalidGrid(
            "s_max_mult and v_max_mult must exceed 1".into(),
        ));
    }
    if !(spec.condense_strength >= 0.0) {
        return Err(Error::InvalidGrid(
            "condense_strength must be nonnegative".into(),
        ));
    }
    let s_ref = model.s0.max(strike);
    let s_max = spec.s_max_mult * s_ref;

    let mut points = if spec.condense_points.is_empty() {
        vec![model.s0, strike]
    } else {
        spec.condense_points.clone()
    };
    if let Some(p) = points.iter().find(|&&p| !(0.0..=s_max).contains(&p)) {
        return Err(Error::InvalidGrid(format!(
            "condense point {p} outside [0, {s_max}]"
        )));
    }
    points.sort_by(|a, b| a.partial_cmp(b).unwrap());
    points.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * b.abs().max(1.0));

    let mut s_nodes = match spec.kind {
        SpotGridKind::Sinh => {
            let alpha = if spec.condense_strength == 0.0 {
                f64::INFINITY
            } else {
                s_ref / spec.condense_strength
            };
            sinh_axis(spec.ns, s_max, &points, alpha)
        }
        SpotGridKind::LogUniform { s_min } => log_uniform_axis(spec.ns, s_min, s_max, model.s0)?,
    };
    if Grid2D::find_node(&s_nodes, model.s0).is_none() {
        snap_node(&mut s_nodes, model.s0);
    }

    let v_max = spec.v_max_mult * model.v0;
    let mut v_nodes: Vec<f64> = (0..spec.nv)
        .map(|j| v_max * j as f64 / (spec.nv - 1) as f64)
        .collect();
    if Grid2D::find_node(&v_nodes, model.v0).is_none() {
        snap_node(&mut v_nodes, model.v0);
    } else if let Some(j) = Grid2D::find_node(&v_nodes, model.v0) {
        v_nodes[j] = model.v0;
    }
    if let Some(i) = Grid2D::find_node(&s_nodes, model.s0) {
        s_nodes[i] = model.s0;
    }
    Grid2D::from_nodes(s_nodes, v_nodes)
}

/// What a field's values mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FieldKind {
    OptionValue,
    Density,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub values: Vec<f64>,
    pub kind: FieldKind,
}

impl Field {
    pub fn zeros(grid: &Grid2D, kind: FieldKind) -> Self {
        Field {
            values: vec![0.0; grid.len()],
            kind,
        }
    }

    pub fn from_fn<F: Fn(f64, f64) -> f64>(grid: &Grid2D, kind: FieldKind, f: F) -> Self {
        let mut values = Vec::with_capacity(grid.len());
        for &s in grid.s_nodes() {
            for &v in grid.v_nodes() {
                values.push(f(s, v));
            }
        }
        Field { values, kind }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn check_grid(&self, grid: &Grid2D) -> Result<()> {
        if self.values.len() != grid.len() {
            return Err(Error::GridMismatch {
                expected: grid.len(),
                actual: self.values.len(),
            });
        }
        Ok(())
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptionKind {
    Call,
    Put,
}

/// Vanilla payoff.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Payoff {
    pub kind: OptionKind,
    pub strike: f64,
}

impl Payoff {
    pub fn call(strike: f64) -> Self {
        Payoff {
            kind: OptionKind::Call,
            strike,
        }
    }

    pub fn put(strike: f64) -> Self {
        Payoff {
            kind: OptionKind::Put,
            strike,
        }
    }

    pub fn value(&self, s: f64) -> f64 {
        match self.kind {
            OptionKind::Call => (s - self.strike).max(0.0),
            OptionKind::Put => (self.strike - s).max(0.0),
        }
    }

    /// Exact `int_a^b payoff(s) ds` for the piecewise-linear payoff.
    pub fn integral(&self, a: f64, b: f64) -> f64 {
        let k = self.strike;
        match self.kind {
            OptionKind::Call => {
                let lo = a.max(k);
                if b <= lo {
                    0.0
                } else {
                    0.5 * ((b - k).powi(2) - (lo - k).powi(2))
                }
            }
            OptionKind::Put => {
                let hi = b.min(k);
                if hi <= a {
                    0.0
                } else {
                    0.5 * ((k - a).powi(2) - (k - hi).powi(2))
                }
            }
        }
    }
}

/// Cell `[S_{i-1/2}, S_{i+1/2}]` of spot node `i` (half cells at the ends).
fn spot_cell(grid: &Grid2D, i: usize) -> (f64, f64) {
    let s = grid.s_nodes();
    let lo = if i == 0 {
        s[0]
    } else {
        0.5 * (s[i - 1] + s[i])
    };
    let hi = if i + 1 == s.len() {
        s[i]
    } else {
        0.5 * (s[i] + s[i + 1])
    };
    (lo, hi)
}

fn replicate_rows(grid: &Grid2D, row: &[f64], kind: FieldKind) -> Field {
    let nv = grid.nv();
    let mut values = Vec::with_capacity(grid.len());
    for &x in row {
        values.extend(std::iter::repeat(x).take(nv));
    }
    Field { values, kind }
}

/// Vanilla payoff sampled on the grid, with the node(s) whose cell contains
/// the strike replaced by the exact cell average.
pub fn cell_average_payoff(payoff: &Payoff, grid: &Grid2D) -> Field {
    let row: Vec<f64> = (0..grid.ns())
        .map(|i| {
            let (lo, hi) = spot_cell(grid, i);
            if lo < payoff.strike && payoff.strike < hi {
                payoff.integral(lo, hi) / (hi - lo)
            } else {
                payoff.value(grid.s_nodes()[i])
            }
        })
        .collect();
    replicate_rows(grid, &row, FieldKind::OptionValue)
}

/// Cell averaging for an arbitrary payoff function with a kink at `strike`;
/// each side of the kink is integrated with a five-point Gauss rule.
pub fn cell_average_fn<F: Fn(f64) -> f64>(payoff: F, grid: &Grid2D, strike: f64) -> Field {
    let row: Vec<f64> = (0..grid.ns())
        .map(|i| {
            let (lo, hi) = spot_cell(grid, i);
            if lo < strike && strike < hi {
                (gauss_legendre_5(&payoff, lo, strike) + gauss_legendre_5(&payoff, strike, hi))
                    / (hi - lo)
            } else {
                payoff(grid.s_nodes()[i])
            }
        })
        .collect();
    replicate_rows(grid, &row, FieldKind::OptionValue)
}

/// Discrete `delta(S - S0) delta(v - v0)`: unit cell-weighted mass at the
/// `(S0, v0)` node.
pub fn discretize_delta(grid: &Grid2D, model: &ModelParams) -> Result<Field> {
    let (i0, j0) = grid.spot_node(model)?;
    let mut field = Field::zeros(grid, FieldKind::Density);
    field.values[grid.index(i0, j0)] = 1.0 / grid.cell_area(i0, j0);
    Ok(field)
}

/// Cell-weighted inner product `sum p_ij V_ij dS_i dv_j`.
pub fn integrate_against(density: &Field, values: &Field, grid: &Grid2D) -> Result<f64> {
    density.check_grid(grid)?;
    values.check_grid(grid)?;
    let nv = grid.nv();
    let mut total = 0.0;
    for (i, ws) in grid.s_cell_widths().iter().enumerate() {
        let row: f64 = (0..nv)
            .map(|j| {
                let k = i * nv + j;
                density.values[k] * values.values[k] * grid.v_cell_widths()[j]
            })
            .sum();
        total += row * ws;
    }
    Ok(total)
}

/// Pointwise `density * cell area`: probability mass (Arrow-Debreu prices) per node.
pub fn density_to_mass(density: &Field, grid: &Grid2D) -> Vec<f64> {
    let nv = grid.nv();
    density
        .values
        .iter()
        .enumerate()
        .map(|(k, p)| p * grid.cell_area(k / nv, k % nv))
        .collect()
}

pub fn mass_to_density(mass: &[f64], grid: &Grid2D) -> Field {
    let nv = grid.nv();
    Field {
        values: mass
            .iter()
            .enumerate()
            .map(|(k, m)| m / grid.cell_area(k / nv, k % nv))
            .collect(),
        kind: FieldKind::Density,
    }
}
