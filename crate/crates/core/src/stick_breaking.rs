//! Truncated stick-breaking weights and their variational Beta posterior.
//!
//! The last stick is fixed at `beta_T = 1`, so a truncation level `T` has
//! `T - 1` free Beta factors and the weights always sum to one.

use nalgebra::DMatrix;

use crate::distributions::{kl_beta, BetaParams};
use crate::special_math::digamma;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct StickPosterior {
    pub gamma1: Vec<f64>,
    pub gamma2: Vec<f64>,
    pub eta: f64,
}

impl StickPosterior {
    /// The prior `Beta(1, eta)` on every stick.
    pub fn prior(truncation: usize, eta: f64) -> Result<Self> {
        check_eta(eta)?;
        if truncation == 0 {
            return Err(Error::Domain("truncation level must be at least 1".into()));
        }
        Ok(Self {
            gamma1: vec![1.0; truncation],
            gamma2: vec![eta; truncation],
            eta,
        })
    }

    pub fn truncation(&self) -> usize {
        self.gamma1.len()
    }

    /// Posterior means of the mixture weights, `E[beta_t] prod_{l<t} E[1 - beta_l]`.
    pub fn expected_weights(&self) -> Vec<f64> {
        let t = self.truncation();
        let mut out = Vec::with_capacity(t);
        let mut rest = 1.0;
        for i in 0..t {
            if i + 1 == t {
                out.push(rest);
            } else {
                let m = self.gamma1[i] / (self.gamma1[i] + self.gamma2[i]);
                out.push(rest * m);
                rest *= 1.0 - m;
            }
        }
        out
    }

    /// Sum of `KL(q(beta_t) || Beta(1, eta))` over the free sticks.
    pub fn kl_to_prior(&self) -> Result<f64> {
        let prior = BetaParams::new(1.0, self.eta)?;
        let t = self.truncation();
        let mut kl = 0.0;
        for i in 0..t.saturating_sub(1) {
            kl += kl_beta(&BetaParams::new(self.gamma1[i], self.gamma2[i])?, &prior)?;
        }
        Ok(kl)
    }
}

fn check_eta(eta: f64) -> Result<()> {
    if !(eta > 0.0) || !eta.is_finite() {
        return Err(Error::Domain(format!("concentration must be positive, got {eta}")));
    }
    Ok(())
}

/// Mixture weights from `T - 1` stick proportions.
pub fn stick_weights(beta: &[f64]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(beta.len() + 1);
    let mut rest = 1.0;
    for (i, &b) in beta.iter().enumerate() {
        if !(b > 0.0 && b < 1.0) {
            return Err(Error::Domain(format!("stick proportion {i} = {b} outside (0, 1)")));
        }
        out.push(b * rest);
        rest *= 1.0 - b;
    }
    out.push(rest);
    Ok(out)
}

/// Coordinate update of the stick posterior from responsibilities.
///
/// `gamma1_t = 1 + sum_j phi_jt` and `gamma2_t = eta + sum_j sum_{r>t} phi_jr`.
/// `phi` holds probabilities (not logs), one row per observation.
pub fn update_gamma(phi: &DMatrix<f64>, eta: f64) -> Result<StickPosterior> {
    check_eta(eta)?;
    let t = phi.ncols();
    if t == 0 {
        return Err(Error::Shape("responsibility matrix has no columns".into()));
    }
    for (j, row) in phi.row_iter().enumerate() {
        if row.iter().any(|v| !(*v >= 0.0 && *v <= 1.0 + 1e-12)) {
            return Err(Error::Domain(format!("responsibility row {j} has entries outside [0, 1]")));
        }
        let s: f64 = row.sum();
        if (s - 1.0).abs() > 1e-8 {
            return Err(Error::Domain(format!("responsibility row {j} sums to {s}")));
        }
    }
    let mass: Vec<f64> = (0..t).map(|c| phi.column(c).sum()).collect();
    let mut gamma1 = Vec::with_capacity(t);
    let mut gamma2 = vec![0.0; t];
    let mut tail = 0.0;
    for c in (0..t).rev() {
        gamma2[c] = eta + tail;
        tail += mass[c];
    }
    for m in &mass {
        gamma1.push(1.0 + m);
    }
    Ok(StickPosterior { gamma1, gamma2, eta })
}

/// `E[ln pi_t]` under the Beta posterior, including the preceding sticks.
pub fn expected_log_pi(sp: &StickPosterior) -> Result<Vec<f64>> {
    let t = sp.truncation();
    let mut out = Vec::with_capacity(t);
    let mut prefix = 0.0;
    for i in 0..t {
        if i + 1 == t {
            out.push(prefix);
        } else {
            let total = digamma(sp.gamma1[i] + sp.gamma2[i])?;
            out.push(prefix + digamma(sp.gamma1[i])? - total);
            prefix += digamma(sp.gamma2[i])? - total;
        }
    }
    Ok(out)
}
