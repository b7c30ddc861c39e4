//! Direct solvers used by the time steppers.
//!
//! Both factorizations keep their `L` and `U` factors so that `M^T x = b`
//! can be solved with the same numbers as `M x = b` (`M^T = U^T L^T`).

use nalgebra::DMatrix;

use crate::error::{Error, Result};

const PIVOT_FLOOR: f64 = 1e-300;

/// LU factors of a tridiagonal matrix, no pivoting.
#[derive(Debug, Clone)]
pub struct TridiagLu {
    /// Multipliers `l_i` (unit lower bidiagonal), `l[0]` unused.
    l: Vec<f64>,
    /// Diagonal of `U`.
    u: Vec<f64>,
    /// Superdiagonal of `U` (equal to the matrix superdiagonal).
    c: Vec<f64>,
}

impl TridiagLu {
    /// Factor the matrix with sub-diagonal `a` (`a[0]` ignored), diagonal `b`
    /// and super-diagonal `c` (`c[n-1]` ignored).
    pub fn new(a: &[f64], b: &[f64], c: &[f64]) -> Result<Self> {
        let n = b.len();
        let mut l = vec![0.0; n];
        let mut u = vec![0.0; n];
        u[0] = b[0];
        for i in 1..n {
            if u[i - 1].abs() < PIVOT_FLOOR || !u[i - 1].is_finite() {
                return Err(Error::Singular {
                    row: i - 1,
                    pivot: u[i - 1],
                });
            }
            l[i] = a[i] / u[i - 1];
            u[i] = b[i] - l[i] * c[i - 1];
        }
        if u[n - 1].abs() < PIVOT_FLOOR || !u[n - 1].is_finite() {
            return Err(Error::Singular {
                row: n - 1,
                pivot: u[n - 1],
            });
        }
        Ok(TridiagLu {
            l,
            u,
            c: c.to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    /// Solve `M x = rhs` in place.
    pub fn solve(&self, x: &mut [f64]) {
        let n = self.u.len();
        for i in 1..n {
            x[i] -= self.l[i] * x[i - 1];
        }
        x[n - 1] /= self.u[n - 1];
        for i in (0..n - 1).rev() {
            x[i] = (x[i] - self.c[i] * x[i + 1]) / self.u[i];
        }
    }

    /// Solve `M^T x = rhs` in place.
    pub fn solve_transpose(&self, x: &mut [f64]) {
        let n = self.u.len();
        x[0] /= self.u[0];
        for i in 1..n {
            x[i] = (x[i] - self.c[i - 1] * x[i - 1]) / self.u[i];
        }
        for i in (0..n - 1).rev() {
            x[i] -= self.l[i + 1] * x[i + 1];
        }
    }
}

/// General band matrix with `kl` sub- and `ku` super-diagonals.
#[derive(Debug, Clone)]
pub struct BandMatrix {
    n: usize,
    kl: usize,
    ku: usize,
    /// Row-major: row `i` holds columns `i - kl ..= i + ku`.
    data: Vec<f64>,
}

impl BandMatrix {
    pub fn zeros(n: usize, kl: usize, ku: usize) -> Self {
        BandMatrix {
            n,
            kl,
            ku,
            data: vec![0.0; n * (kl + ku + 1)],
        }
    }

    #[inline]
    fn slot(&self, i: usize, j: usize) -> Option<usize> {
        if j + self.kl < i || j > i + self.ku {
            None
        } else {
            Some(i * (self.kl + self.ku + 1) + (j + self.kl - i))
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.slot(i, j).map_or(0.0, |k| self.data[k])
    }

    /// Panics if `(i, j)` is outside the band.
    pub fn add(&mut self, i: usize, j: usize, value: f64) {
        let k = self.slot(i, j).expect("entry outside band");
        self.data[k] += value;
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| {
                let lo = i.saturating_sub(self.kl);
                let hi = (i + self.ku).min(self.n - 1);
                (lo..=hi).map(|j| self.get(i, j) * x[j]).sum()
            })
            .collect()
    }

    pub fn matvec_transpose(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        for i in 0..self.n {
            let lo = i.saturating_sub(self.kl);
            let hi = (i + self.ku).min(self.n - 1);
            for j in lo..=hi {
                y[j] += self.get(i, j) * x[i];
            }
        }
        y
    }
}

/// In-place band LU without pivoting; `L` is unit lower triangular.
#[derive(Debug, Clone)]
pub struct BandLu {
    lu: BandMatrix,
}

impl BandLu {
    pub fn new(mut a: BandMatrix) -> Result<Self> {
        let n = a.n;
        for k in 0..n {
            let pivot = a.get(k, k);
            if pivot.abs() < PIVOT_FLOOR || !pivot.is_finite() {
                return Err(Error::Singular { row: k, pivot });
            }
            let row_end = (k + a.kl).min(n - 1);
            let col_end = (k + a.ku).min(n - 1);
            for i in k + 1..=row_end {
                let m = a.get(i, k) / pivot;
                if m == 0.0 {
                    continue;
                }
                let s = a.slot(i, k).unwrap();
                a.data[s] = m;
                for j in k + 1..=col_end {
                    let ukj = a.get(k, j);
                    if ukj != 0.0 {
                        let s = a.slot(i, j).unwrap();
                        a.data[s] -= m * ukj;
                    }
                }
            }
        }
        Ok(BandLu { lu: a })
    }

    pub fn solve(&self, b: &mut [f64]) {
        let a = &self.lu;
        let n = a.n;
        for i in 0..n {
            let lo = i.saturating_sub(a.kl);
            let s: f64 = (lo..i).map(|j| a.get(i, j) * b[j]).sum();
            b[i] -= s;
        }
        for i in (0..n).rev() {
            let hi = (i + a.ku).min(n - 1);
            let s: f64 = (i + 1..=hi).map(|j| a.get(i, j) * b[j]).sum();
            b[i] = (b[i] - s) / a.get(i, i);
        }
    }

    /// Solve `A^T x = b` with the factors of `A`.
    pub fn solve_transpose(&self, b: &mut [f64]) {
        let a = &self.lu;
        let n = a.n;
        // U^T z = b
        for i in 0..n {
            let lo = i.saturating_sub(a.ku);
            let s: f64 = (lo..i).map(|j| a.get(j, i) * b[j]).sum();
            b[i] = (b[i] - s) / a.get(i, i);
        }
        // L^T x = z
        for i in (0..n).rev() {
            let hi = (i + a.kl).min(n - 1);
            let s: f64 = (i + 1..=hi).map(|j| a.get(j, i) * b[j]).sum();
            b[i] -= s;
        }
    }
}

/// Maximum absolute entry.
pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |acc, x| acc.max(x.abs()))
}

fn norm_one(m: &DMatrix<f64>) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Matrix exponential by scaling and squaring with the diagonal (6,6) Pade
/// approximant.
pub fn expm(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if n != a.ncols() {
        return Err(Error::Exponential("matrix is not square".into()));
    }
    let norm = norm_one(a);
    if !norm.is_finite() {
        return Err(Error::Exponential("non-finite entries".into()));
    }
    let squarings = if norm > 0.5 {
        (norm / 0.5).log2().ceil() as i32
    } else {
        0
    };
    let scaled = a / 2f64.powi(squarings);
    // c_k = (2q-k)! q! / ((2q)! k! (q-k)!), q = 6
    let q = 6usize;
    let mut c = vec![1.0; q + 1];
    for k in 1..=q {
        c[k] = c[k - 1] * (q + 1 - k) as f64 / (k * (2 * q + 1 - k)) as f64;
    }
    let id = DMatrix::<f64>::identity(n, n);
    let mut power = id.clone();
    let mut num = id.clone();
    let mut den = id.clone();
    for (k, ck) in c.iter().enumerate().skip(1) {
        power = &power * &scaled;
        num += &power * *ck;
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        den += &power * (sign * ck);
    }
    let mut result = den
        .lu()
        .solve(&num)
        .ok_or_else(|| Error::Exponential("Pade denominator is singular".into()))?;
    for _ in 0..squarings {
        result = &result * &result;
    }
    if result.iter().any(|x| !x.is_finite()) {
        return Err(Error::Exponential("overflow during squaring".into()));
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dense_tridiag(a: &[f64], b: &[f64], c: &[f64]) -> DMatrix<f64> {
        let n = b.len();
        DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                b[i]
            } else if j + 1 == i {
                a[i]
            } else if i + 1 == j {
                c[i]
            } else {
                0.0
            }
        })
    }

    proptest! {
        #[test]
        fn tridiag_solves_match_dense(
            n in 2usize..12,
            seed in proptest::collection::vec(-1.0f64..1.0, 36),
        ) {
            let a: Vec<f64> = (0..n).map(|i| seed[i]).collect();
            let c: Vec<f64> = (0..n).map(|i| seed[12 + i]).collect();
            let b: Vec<f64> = (0..n).map(|i| 3.0 + seed[24 + i]).collect();
            let lu = TridiagLu::new(&a, &b, &c).unwrap();
            let m = dense_tridiag(&a, &b, &c);
            let rhs: Vec<f64> = (0..n).map(|i| (i as f64 * 0.7).sin()).collect();
            let mut x = rhs.clone();
            lu.solve(&mut x);
            let r = &m * DMatrix::from_column_slice(n, 1, &x);
            for i in 0..n { prop_assert!((r[i] - rhs[i]).abs() < 1e-12); }
            let mut y = rhs.clone();
            lu.solve_transpose(&mut y);
            let r = m.transpose() * DMatrix::from_column_slice(n, 1, &y);
            for i in 0..n { prop_assert!((r[i] - rhs[i]).abs() < 1e-12); }
        }
    }

    #[test]
    fn band_lu_matches_dense() {
        let n = 30;
        let (kl, ku) = (4, 3);
        let mut band = BandMatrix::zeros(n, kl, ku);
        let mut dense = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in i.saturating_sub(kl)..=(i + ku).min(n - 1) {
                let v = if i == j {
                    10.0
                } else {
                    ((i * 7 + j * 3) as f64).sin()
                };
                band.add(i, j, v);
                dense[(i, j)] = v;
            }
        }
        let rhs: Vec<f64> = (0..n).map(|i| (i as f64).cos()).collect();
        let lu = BandLu::new(band.clone()).unwrap();
        let mut x = rhs.clone();
        lu.solve(&mut x);
        let r = &dense * DMatrix::from_column_slice(n, 1, &x);
        for i in 0..n {
            assert!((r[i] - rhs[i]).abs() < 1e-12);
        }
        let mut y = rhs.clone();
        lu.solve_transpose(&mut y);
        let r = dense.transpose() * DMatrix::from_column_slice(n, 1, &y);
        for i in 0..n {
            assert!((r[i] - rhs[i]).abs() < 1e-12);
        }
        let mv = band.matvec(&rhs);
        let mt = band.matvec_transpose(&rhs);
        let d = &dense * DMatrix::from_column_slice(n, 1, &rhs);
        let dt = dense.transpose() * DMatrix::from_column_slice(n, 1, &rhs);
        for i in 0..n {
            assert!((mv[i] - d[i]).abs() < 1e-12);
            assert!((mt[i] - dt[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn singular_tridiagonal_is_reported() {
        let err = TridiagLu::new(&[0.0, 1.0], &[0.0, 1.0], &[1.0, 0.0]).unwrap_err();
        assert!(matches!(err, Error::Singular { row: 0, .. }));
    }

    /// Taylor series with its own scaling, independent of the Pade route.
    fn expm_taylor(a: &DMatrix<f64>) -> DMatrix<f64> {
        let s = 10;
        let scaled = a / 2f64.powi(s);
        let n = a.nrows();
        let mut term = DMatrix::<f64>::identity(n, n);
        let mut sum = term.clone();
        for k in 1..30 {
            term = &term * &scaled / k as f64;
            sum += &term;
        }
        for _ in 0..s {
            sum = &sum * &sum;
        }
        sum
    }

    #[test]
    fn expm_matches_taylor_oracle() {
        let n = 8;
        let a = DMatrix::from_fn(n, n, |i, j| ((i * 3 + j * 5) as f64).sin() * 1.5);
        let diff = max_abs(&(expm(&a).unwrap() - expm_taylor(&a)));
        assert!(diff < 1e-10, "{diff}");
    }

    #[test]
    fn expm_of_zero_and_diagonal() {
        let z = DMatrix::<f64>::zeros(4, 4);
        assert_eq!(expm(&z).unwrap(), DMatrix::identity(4, 4));
        let d = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![-3.0, 0.5, 7.0]));
        let e = expm(&d).unwrap();
        for (k, x) in [-3.0f64, 0.5, 7.0].iter().enumerate() {
            assert!((e[(k, k)] - x.exp()).abs() < 1e-12 * x.exp());
        }
    }
}
