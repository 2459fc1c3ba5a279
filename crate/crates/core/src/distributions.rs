//! Log-densities, entropies and closed-form KL divergences.
//!
//! Covariances are always [`SpdMatrix`] values, so every density is
//! evaluated through triangular solves against the Cholesky factor.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use crate::special_math::{digamma, ln_gamma, log_multivariate_gamma, multivariate_digamma, SpdMatrix};
use crate::{Error, Result};

/// Label smoothing applied to one-hot supervision targets.
pub const LABEL_SMOOTHING: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianParams {
    pub mean: DVector<f64>,
    pub cov: SpdMatrix,
}

impl GaussianParams {
    pub fn new(mean: DVector<f64>, cov: SpdMatrix) -> Result<Self> {
        if mean.len() != cov.dim() {
            return Err(Error::Shape(format!(
                "mean has length {} but covariance is {}x{}",
                mean.len(),
                cov.dim(),
                cov.dim()
            )));
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite gaussian mean".into()));
        }
        Ok(Self { mean, cov })
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mean: DVector::zeros(dim),
            cov: SpdMatrix::identity(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Normal-inverse-Wishart prior.
///
/// A single `kappa` serves both as the mean's concentration (the mean has
/// covariance `Sigma / kappa`) and as the Wishart degrees of freedom of the
/// precision matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct NIWParams {
    pub m: DVector<f64>,
    pub kappa: f64,
    pub v: SpdMatrix,
}

impl NIWParams {
    pub fn new(m: DVector<f64>, kappa: f64, v: SpdMatrix) -> Result<Self> {
        let p = m.len();
        if v.dim() != p {
            return Err(Error::Shape(format!(
                "prior mean has length {p} but scale matrix is {}x{}",
                v.dim(),
                v.dim()
            )));
        }
        check_dof(kappa, p)?;
        Ok(Self { m, kappa, v })
    }

    /// `m = 0`, `kappa = p + 2`, `V = I`.
    pub fn default_for_dim(p: usize) -> Self {
        Self {
            m: DVector::zeros(p),
            kappa: p as f64 + 2.0,
            v: SpdMatrix::identity(p),
        }
    }

    pub fn dim(&self) -> usize {
        self.m.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BetaParams {
    pub a: f64,
    pub b: f64,
}

impl BetaParams {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        if !(a > 0.0 && b > 0.0) || !a.is_finite() || !b.is_finite() {
            return Err(Error::Domain(format!("beta parameters must be positive, got ({a}, {b})")));
        }
        Ok(Self { a, b })
    }

    pub fn mean(&self) -> f64 {
        self.a / (self.a + self.b)
    }
}

fn check_dof(kappa: f64, p: usize) -> Result<()> {
    if !(kappa > p as f64 - 1.0) || !kappa.is_finite() {
        return Err(Error::Domain(format!(
            "degrees of freedom {kappa} must exceed p - 1 = {}",
            p as f64 - 1.0
        )));
    }
    Ok(())
}

fn check_dims(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{what}: dimension {a} vs {b}")));
    }
    Ok(())
}

pub fn mvn_logpdf(x: &DVector<f64>, params: &GaussianParams) -> Result<f64> {
    check_dims(x.len(), params.dim(), "mvn_logpdf")?;
    let p = x.len() as f64;
    let diff = x - &params.mean;
    let quad = params.cov.quad_form_inv(&diff)?;
    Ok(-0.5 * (p * (2.0 * PI).ln() + params.cov.log_det() + quad))
}

/// Trace of `A^-1 B` for SPD `A`.
fn trace_inv_times(a: &SpdMatrix, b: &DMatrix<f64>) -> f64 {
    let n = a.dim();
    let mut tr = 0.0;
    for j in 0..n {
        let col = a.solve(&b.column(j).into_owned()).expect("dimension checked");
        tr += col[j];
    }
    tr
}

/// Wishart log-density of the precision `lambda` with `kappa` degrees of
/// freedom and scale `v`.
pub fn wishart_logpdf(lambda: &SpdMatrix, kappa: f64, v: &SpdMatrix) -> Result<f64> {
    check_dims(lambda.dim(), v.dim(), "wishart_logpdf")?;
    let p = v.dim();
    check_dof(kappa, p)?;
    let pf = p as f64;
    let tr = trace_inv_times(v, &lambda.to_dense());
    Ok(-(kappa * pf / 2.0) * 2f64.ln() - (kappa / 2.0) * v.log_det()
        - log_multivariate_gamma(p, kappa / 2.0)?
        + ((kappa - pf - 1.0) / 2.0) * lambda.log_det()
        - tr / 2.0)
}

/// Joint NIW log-density: `N(mu; m, Sigma/kappa) * W(Sigma^-1; kappa, V)`.
pub fn niw_logpdf(mu: &DVector<f64>, sigma: &SpdMatrix, prior: &NIWParams) -> Result<f64> {
    check_dims(mu.len(), prior.dim(), "niw_logpdf mean")?;
    check_dims(sigma.dim(), prior.dim(), "niw_logpdf covariance")?;
    check_dof(prior.kappa, prior.dim())?;
    let scaled = SpdMatrix::from_cholesky(sigma.cholesky_factor() / prior.kappa.sqrt())?;
    let normal = mvn_logpdf(mu, &GaussianParams::new(prior.m.clone(), scaled)?)?;
    let precision = crate::special_math::cholesky(&sigma.inverse())?;
    Ok(normal + wishart_logpdf(&precision, prior.kappa, &prior.v)?)
}

pub fn gaussian_entropy(cov: &SpdMatrix) -> f64 {
    let p = cov.dim() as f64;
    0.5 * p * (1.0 + (2.0 * PI).ln()) + 0.5 * cov.log_det()
}

fn ln_beta_fn(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

pub fn kl_beta(q: &BetaParams, p: &BetaParams) -> Result<f64> {
    let s = q.a + q.b;
    Ok(ln_beta_fn(p.a, p.b) - ln_beta_fn(q.a, q.b)
        + (q.a - p.a) * digamma(q.a)?
        + (q.b - p.b) * digamma(q.b)?
        + (p.a - q.a + p.b - q.b) * digamma(s)?)
}

pub fn kl_gaussian(q: &GaussianParams, p: &GaussianParams) -> Result<f64> {
    check_dims(q.dim(), p.dim(), "kl_gaussian")?;
    let dim = q.dim() as f64;
    let tr = trace_inv_times(&p.cov, &q.cov.to_dense());
    let diff = &p.mean - &q.mean;
    let quad = p.cov.quad_form_inv(&diff)?;
    Ok(0.5 * (tr + quad - dim + p.cov.log_det() - q.cov.log_det()))
}

/// Wishart parameters: degrees of freedom and scale matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct WishartParams {
    pub kappa: f64,
    pub v: SpdMatrix,
}

pub fn kl_wishart(q: &WishartParams, p: &WishartParams) -> Result<f64> {
    check_dims(q.v.dim(), p.v.dim(), "kl_wishart")?;
    let d = q.v.dim();
    check_dof(q.kappa, d)?;
    check_dof(p.kappa, d)?;
    let tr = trace_inv_times(&p.v, &q.v.to_dense());
    Ok((p.kappa / 2.0) * (p.v.log_det() - q.v.log_det())
        + (q.kappa / 2.0) * (tr - d as f64)
        + log_multivariate_gamma(d, p.kappa / 2.0)?
        - log_multivariate_gamma(d, q.kappa / 2.0)?
        + ((q.kappa - p.kappa) / 2.0) * multivariate_digamma(d, q.kappa)?)
}

fn check_probability(v: &[f64], what: &str) -> Result<()> {
    if v.is_empty() {
        return Err(Error::Domain(format!("{what}: empty probability vector")));
    }
    if v.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) {
        return Err(Error::Domain(format!("{what}: negative or non-finite entry")));
    }
    let s: f64 = v.iter().sum();
    if (s - 1.0).abs() > 1e-8 {
        return Err(Error::Domain(format!("{what}: entries sum to {s}")));
    }
    Ok(())
}

pub fn kl_categorical(q: &[f64], p: &[f64]) -> Result<f64> {
    check_dims(q.len(), p.len(), "kl_categorical")?;
    check_probability(q, "kl_categorical q")?;
    check_probability(p, "kl_categorical p")?;
    let mut kl = 0.0;
    for (i, (&qi, &pi)) in q.iter().zip(p).enumerate() {
        if qi == 0.0 {
            continue;
        }
        if pi == 0.0 {
            return Err(Error::Domain(format!(
                "kl_categorical: q[{i}] = {qi} outside the support of p"
            )));
        }
        kl += qi * (qi / pi).ln();
    }
    Ok(kl)
}

/// One-hot target over `k` classes with `LABEL_SMOOTHING` mass on every
/// other class.
pub fn smoothed_one_hot(label: usize, k: usize) -> Vec<f64> {
    let mut v = vec![LABEL_SMOOTHING; k];
    v[label] = 1.0 - LABEL_SMOOTHING * (k as f64 - 1.0);
    v
}
