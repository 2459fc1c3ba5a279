//! Scalar special functions and Cholesky-backed SPD matrices.

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

const SYMMETRY_TOL: f64 = 1e-10;

/// Digamma function for `x > 0`.
///
/// Shifts the argument up to `x >= 6` with `psi(x) = psi(x + 1) - 1/x`, then
/// applies the asymptotic expansion with seven Bernoulli terms.
pub fn digamma(x: f64) -> Result<f64> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(Error::Domain(format!("digamma requires x > 0, got {x}")));
    }
    let mut x = x;
    let mut acc = 0.0;
    while x < 6.0 {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    // Bernoulli coefficients B_2k / (2k), innermost term first.
    let series = inv2
        * (1.0 / 12.0
            - inv2
                * (1.0 / 120.0
                    - inv2
                        * (1.0 / 252.0
                            - inv2
                                * (1.0 / 240.0
                                    - inv2
                                        * (1.0 / 132.0
                                            - inv2 * (691.0 / 32760.0 - inv2 / 12.0))))));
    Ok(acc + x.ln() - 0.5 * inv - series)
}

const LANCZOS_G: f64 = 7.0;
const LANCZOS_COEF: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// Natural log of the gamma function for `x > 0` (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // reflection
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = LANCZOS_COEF[0];
    let t = x + LANCZOS_G + 0.5;
    for (i, c) in LANCZOS_COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// `ln Gamma_p(a)` for `a > (p - 1) / 2`.
pub fn log_multivariate_gamma(p: usize, a: f64) -> Result<f64> {
    if p == 0 {
        return Err(Error::Domain("multivariate gamma needs p >= 1".into()));
    }
    if !(a > (p as f64 - 1.0) / 2.0) {
        return Err(Error::Domain(format!(
            "multivariate gamma of order {p} requires a > {}, got {a}",
            (p as f64 - 1.0) / 2.0
        )));
    }
    let pf = p as f64;
    let mut acc = pf * (pf - 1.0) / 4.0 * std::f64::consts::PI.ln();
    for j in 1..=p {
        acc += ln_gamma(a + (1.0 - j as f64) / 2.0);
    }
    Ok(acc)
}

/// Sum of `digamma((a + 1 - j) / 2)` for `j = 1..=p`.
pub fn multivariate_digamma(p: usize, a: f64) -> Result<f64> {
    (1..=p)
        .map(|j| digamma((a + 1.0 - j as f64) / 2.0))
        .sum()
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Symmetric positive definite matrix stored as its lower Cholesky factor.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdMatrix {
    chol: DMatrix<f64>,
}

impl SpdMatrix {
    /// Wraps a lower-triangular factor; entries above the diagonal are ignored.
    pub fn from_cholesky(l: DMatrix<f64>) -> Result<Self> {
        if !l.is_square() || l.nrows() == 0 {
            return Err(Error::Shape(format!(
                "cholesky factor must be square and non-empty, got {}x{}",
                l.nrows(),
                l.ncols()
            )));
        }
        let mut l = l;
        let n = l.nrows();
        for i in 0..n {
            if !(l[(i, i)] > 0.0) || !l[(i, i)].is_finite() {
                return Err(Error::NotPositiveDefinite { pivot: i });
            }
            for j in (i + 1)..n {
                l[(i, j)] = 0.0;
            }
        }
        Ok(Self { chol: l })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            chol: DMatrix::identity(dim, dim),
        }
    }

    pub fn from_diagonal(diag: &[f64]) -> Result<Self> {
        let l = DMatrix::from_diagonal(&DVector::from_iterator(
            diag.len(),
            diag.iter().map(|d| d.sqrt()),
        ));
        Self::from_cholesky(l)
    }

    pub fn dim(&self) -> usize {
        self.chol.nrows()
    }

    pub fn cholesky_factor(&self) -> &DMatrix<f64> {
        &self.chol
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        &self.chol * self.chol.transpose()
    }

    pub fn log_det(&self) -> f64 {
        2.0 * (0..self.dim()).map(|i| self.chol[(i, i)].ln()).sum::<f64>()
    }

    /// Solves `L y = b` by forward substitution.
    pub fn solve_lower(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_len(b.len())?;
        let n = self.dim();
        let mut y = b.clone();
        for i in 0..n {
            let mut s = y[i];
            for k in 0..i {
                s -= self.chol[(i, k)] * y[k];
            }
            y[i] = s / self.chol[(i, i)];
        }
        Ok(y)
    }

    /// Solves `L^T x = y` by back substitution.
    pub fn solve_upper(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_len(y.len())?;
        let n = self.dim();
        let mut x = y.clone();
        for i in (0..n).rev() {
            let mut s = x[i];
            for k in (i + 1)..n {
                s -= self.chol[(k, i)] * x[k];
            }
            x[i] = s / self.chol[(i, i)];
        }
        Ok(x)
    }

    /// Solves `(L L^T) x = b`.
    pub fn solve(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        let y = self.solve_lower(b)?;
        self.solve_upper(&y)
    }

    /// Squared Mahalanobis norm `b^T (L L^T)^-1 b`.
    pub fn quad_form_inv(&self, b: &DVector<f64>) -> Result<f64> {
        Ok(self.solve_lower(b)?.norm_squared())
    }

    /// Dense inverse, assembled column by column from solves.
    pub fn inverse(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut inv = DMatrix::zeros(n, n);
        for j in 0..n {
            let mut e = DVector::zeros(n);
            e[j] = 1.0;
            let col = self.solve(&e).expect("dimension checked");
            inv.set_column(j, &col);
        }
        // symmetrize round-off
        (&inv + inv.transpose()) * 0.5
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len != self.dim() {
            return Err(Error::Shape(format!(
                "vector of length {len} against {0}x{0} matrix",
                self.dim()
            )));
        }
        Ok(())
    }
}

/// Cholesky factorization of a symmetric matrix.
///
/// The input is symmetrized as `(A + A^T) / 2` after checking symmetry to
/// within `1e-10` (relative to the largest entry).
pub fn cholesky(a: &DMatrix<f64>) -> Result<SpdMatrix> {
    if !a.is_square() || a.nrows() == 0 {
        return Err(Error::Shape(format!(
            "cholesky needs a non-empty square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    let n = a.nrows();
    let scale = a.amax().max(1.0);
    for i in 0..n {
        for j in (i + 1)..n {
            if (a[(i, j)] - a[(j, i)]).abs() > SYMMETRY_TOL * scale {
                return Err(Error::Domain(format!(
                    "matrix not symmetric at ({i}, {j}): {} vs {}",
                    a[(i, j)],
                    a[(j, i)]
                )));
            }
        }
    }
    let sym = (a + a.transpose()) * 0.5;
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut d = sym[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::NotPositiveDefinite { pivot: j });
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in (j + 1)..n {
            let mut s = sym[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / djj;
        }
    }
    Ok(SpdMatrix { chol: l })
}

pub fn log_det(m: &SpdMatrix) -> f64 {
    m.log_det()
}

pub fn spd_solve(m: &SpdMatrix, b: &DVector<f64>) -> Result<DVector<f64>> {
    m.solve(b)
}
