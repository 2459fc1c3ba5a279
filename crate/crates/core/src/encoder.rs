//! Per-component encoder networks.
//!
//! Each mixture component owns a one-hidden-layer tanh network mapping an
//! input embedding to a Gaussian: a mean head of size `p` and a packed
//! lower-triangular Cholesky head of size `p(p+1)/2`, whose diagonal goes
//! through `softplus(.) + CHOL_FLOOR`.
//!
//! Gradients are hand-derived. For `log N(x; mu, L L^T)` with `r = x - mu`,
//! `z = L^-1 r` and `a = L^-T z`:
//!
//! ```text
//! d/dmu = a
//! d/dL  = tril(a z^T) - diag(1 / L_ii)
//! ```

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::distributions::{GaussianParams, NIWParams};
use crate::special_math::{cholesky, sigmoid, softplus, softplus_inv, SpdMatrix};
use crate::{Error, Result};

/// Floor added to every Cholesky diagonal entry.
pub const CHOL_FLOOR: f64 = 1e-4;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    input_dim: usize,
    hidden: usize,
    /// `[w1 (hidden x p), b1 (hidden), w2 (out x hidden), b2 (out)]`, row-major.
    theta: Vec<f64>,
}

/// Gradient of an objective with respect to [`EncoderParams::as_slice`].
pub type EncoderGrad = Vec<f64>;

impl EncoderParams {
    pub fn output_dim_for(p: usize) -> usize {
        p + p * (p + 1) / 2
    }

    pub fn param_count(p: usize, hidden: usize) -> usize {
        hidden * p + hidden + Self::output_dim_for(p) * hidden + Self::output_dim_for(p)
    }

    /// All weights and biases zero.
    pub fn zeros(p: usize, hidden: usize) -> Self {
        Self {
            input_dim: p,
            hidden,
            theta: vec![0.0; Self::param_count(p, hidden)],
        }
    }

    /// Hidden layer uniform in `+-1/sqrt(p)`; output layer zero, so the
    /// initial encoding is constant in `x` until the heads are trained.
    pub fn init<R: Rng + ?Sized>(p: usize, hidden: usize, rng: &mut R) -> Self {
        let mut e = Self::zeros(p, hidden);
        let bound = 1.0 / (p as f64).sqrt();
        let n_hidden = hidden * p + hidden;
        for v in &mut e.theta[..n_hidden] {
            *v = rng.random_range(-bound..bound);
        }
        e
    }

    pub fn from_parts(p: usize, hidden: usize, theta: Vec<f64>) -> Result<Self> {
        if theta.len() != Self::param_count(p, hidden) {
            return Err(Error::Shape(format!(
                "encoder with p={p}, hidden={hidden} needs {} parameters, got {}",
                Self::param_count(p, hidden),
                theta.len()
            )));
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite encoder parameter".into()));
        }
        Ok(Self {
            input_dim: p,
            hidden,
            theta,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn output_dim(&self) -> usize {
        Self::output_dim_for(self.input_dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.theta
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    fn offsets(&self) -> (usize, usize, usize) {
        let w1 = 0;
        let b1 = self.hidden * self.input_dim;
        let w2 = b1 + self.hidden;
        let b2 = w2 + self.output_dim() * self.hidden;
        debug_assert_eq!(w1, 0);
        (b1, w2, b2)
    }

    fn forward(&self, x: &[f64]) -> Result<Forward> {
        let p = self.input_dim;
        let h = self.hidden;
        let o = self.output_dim();
        let (b1_off, w2_off, b2_off) = self.offsets();
        let th = &self.theta;
        let mut hid = vec![0.0; h];
        for (i, hv) in hid.iter_mut().enumerate() {
            let mut a = th[b1_off + i];
            let row = &th[i * p..(i + 1) * p];
            for k in 0..p {
                a += row[k] * x[k];
            }
            *hv = a.tanh();
        }
        if hid.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite activation in layer 0".into()));
        }
        let mut out = vec![0.0; o];
        for (oi, ov) in out.iter_mut().enumerate() {
            let mut a = th[b2_off + oi];
            let row = &th[w2_off + oi * h..w2_off + (oi + 1) * h];
            for i in 0..h {
                a += row[i] * hid[i];
            }
            *ov = a;
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite activation in layer 1".into()));
        }
        let mut l = vec![0.0; p * p];
        let mut idx = p;
        for r in 0..p {
            for c in 0..=r {
                l[r * p + c] = if r == c {
                    softplus(out[idx]) + CHOL_FLOOR
                } else {
                    out[idx]
                };
                idx += 1;
            }
        }
        Ok(Forward { hid, out, l })
    }

    /// Mean and covariance for input `x`.
    pub fn encode(&self, x: &[f64]) -> Result<GaussianParams> {
        self.check_input(x)?;
        let f = self.forward(x)?;
        let p = self.input_dim;
        let mean = DVector::from_column_slice(&f.out[..p]);
        let l = DMatrix::from_row_slice(p, p, &f.l);
        GaussianParams::new(mean, SpdMatrix::from_cholesky(l)?)
    }

    /// `log N(x; encode(x))` without materializing [`GaussianParams`].
    pub fn self_log_density(&self, x: &[f64]) -> Result<f64> {
        self.check_input(x)?;
        let f = self.forward(x)?;
        Ok(f.log_density(x, self.input_dim))
    }

    /// `log N(y; encode(x))`.
    pub fn log_density_at(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        self.check_input(x)?;
        self.check_input(y)?;
        let f = self.forward(x)?;
        Ok(f.log_density(y, self.input_dim))
    }

    /// True when the output layer ignores the hidden layer, so the encoding
    /// is the same for every input.
    pub fn is_input_independent(&self) -> bool {
        let (_, w2_off, b2_off) = self.offsets();
        self.theta[w2_off..b2_off].iter().all(|w| *w == 0.0)
    }

    /// Self log-densities and entropies of a batch of rows.
    pub(crate) fn batch_density_and_entropy(&self, xs: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
        let p = self.input_dim;
        let shared = match xs.first() {
            Some(x0) if self.is_input_independent() => {
                self.check_input(x0)?;
                Some(self.forward(x0)?)
            }
            _ => None,
        };
        let mut ll = Vec::with_capacity(xs.len());
        let mut ent = Vec::with_capacity(xs.len());
        for x in xs {
            self.check_input(x)?;
            let own;
            let f = match &shared {
                Some(f) => f,
                None => {
                    own = self.forward(x)?;
                    &own
                }
            };
            let half_logdet: f64 = (0..p).map(|i| f.l[i * p + i].ln()).sum();
            ll.push(f.log_density(x, p));
            ent.push(0.5 * p as f64 * (1.0 + LN_2PI) + half_logdet);
        }
        Ok((ll, ent))
    }

    /// Sets the output biases so that the batch-average raw output equals
    /// the head values of `target`.
    pub(crate) fn set_output_bias(&mut self, xs: &[&[f64]], target: &GaussianParams) -> Result<()> {
        let p = self.input_dim;
        let o = self.output_dim();
        let (_, _, b2_off) = self.offsets();
        let mut avg_hidden_out = vec![0.0; o];
        if !xs.is_empty() && !self.is_input_independent() {
            for x in xs {
                let f = self.forward(x)?;
                for oi in 0..o {
                    let b = self.theta[b2_off + oi];
                    avg_hidden_out[oi] += f.out[oi] - b;
                }
            }
            for v in &mut avg_hidden_out {
                *v /= xs.len() as f64;
            }
        }
        let l = target.cov.cholesky_factor();
        let mut idx = p;
        for i in 0..p {
            self.theta[b2_off + i] = target.mean[i] - avg_hidden_out[i];
        }
        for r in 0..p {
            for c in 0..=r {
                let raw = if r == c {
                    softplus_inv((l[(r, c)] - CHOL_FLOOR).max(1e-8))
                } else {
                    l[(r, c)]
                };
                self.theta[b2_off + idx] = raw - avg_hidden_out[idx];
                idx += 1;
            }
        }
        Ok(())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(Error::Shape(format!(
                "encoder expects input of length {}, got {}",
                self.input_dim,
                x.len()
            )));
        }
        Ok(())
    }

    /// Accumulates `dJ/dtheta` given `dJ/dmean` and `dJ/dL` at input `x`.
    fn backward(&self, x: &[f64], f: &Forward, dmean: &[f64], dl: &[f64], grad: &mut [f64]) {
        let p = self.input_dim;
        let h = self.hidden;
        let o = self.output_dim();
        let (b1_off, w2_off, b2_off) = self.offsets();
        let mut dout = vec![0.0; o];
        dout[..p].copy_from_slice(dmean);
        let mut idx = p;
        for r in 0..p {
            for c in 0..=r {
                dout[idx] = if r == c {
                    dl[r * p + c] * sigmoid(f.out[idx])
                } else {
                    dl[r * p + c]
                };
                idx += 1;
            }
        }
        let mut dhid = vec![0.0; h];
        for oi in 0..o {
            let g = dout[oi];
            if g == 0.0 {
                continue;
            }
            grad[b2_off + oi] += g;
            let row = w2_off + oi * h;
            for i in 0..h {
                grad[row + i] += g * f.hid[i];
                dhid[i] += self.theta[row + i] * g;
            }
        }
        for i in 0..h {
            let da = dhid[i] * (1.0 - f.hid[i] * f.hid[i]);
            grad[b1_off + i] += da;
            for k in 0..p {
                grad[i * p + k] += da * x[k];
            }
        }
    }
}

struct Forward {
    hid: Vec<f64>,
    out: Vec<f64>,
    /// Row-major lower Cholesky factor.
    l: Vec<f64>,
}

impl Forward {
    /// Returns `z = L^-1 (y - mu)`.
    fn whiten(&self, y: &[f64], p: usize) -> Vec<f64> {
        let mut z = vec![0.0; p];
        for i in 0..p {
            let mut s = y[i] - self.out[i];
            for k in 0..i {
                s -= self.l[i * p + k] * z[k];
            }
            z[i] = s / self.l[i * p + i];
        }
        z
    }

    fn log_density(&self, y: &[f64], p: usize) -> f64 {
        let z = self.whiten(y, p);
        let half_logdet: f64 = (0..p).map(|i| self.l[i * p + i].ln()).sum();
        -0.5 * (p as f64 * LN_2PI + z.iter().map(|v| v * v).sum::<f64>()) - half_logdet
    }

    /// `a = L^-T z`
    fn back_solve(&self, z: &[f64], p: usize) -> Vec<f64> {
        let mut a = z.to_vec();
        for i in (0..p).rev() {
            let mut s = a[i];
            for k in (i + 1)..p {
                s -= self.l[k * p + i] * a[k];
            }
            a[i] = s / self.l[i * p + i];
        }
        a
    }
}

/// Inputs to the per-component encoder objective.
///
/// The objective for component `t` is
///
/// ```text
/// J = sum_j w_j [log N(x_j; encode(x_j)) + entropy_weight * H(encode(x_j))]
///     + niw_logpdf(mean_j mu(x_j), mean_j Sigma(x_j); prior)
/// ```
///
/// where `w_j` are the component's responsibilities.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveSpec<'a> {
    pub weights: &'a [f64],
    pub prior: Option<&'a NIWParams>,
    pub entropy_weight: f64,
}

fn rows(x: &DMatrix<f64>) -> Vec<Vec<f64>> {
    x.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Value of the component objective.
pub fn component_objective(x: &DMatrix<f64>, params: &EncoderParams, spec: ObjectiveSpec<'_>) -> Result<f64> {
    Ok(objective_impl(&rows(x), params, spec, false)?.0)
}

/// Value and gradient of the component objective.
pub fn grad_elbo_wrt_params(
    x: &DMatrix<f64>,
    params: &EncoderParams,
    spec: ObjectiveSpec<'_>,
) -> Result<(f64, EncoderGrad)> {
    objective_impl(&rows(x), params, spec, true)
}

pub(crate) fn objective_rows(
    xs: &[Vec<f64>],
    params: &EncoderParams,
    spec: ObjectiveSpec<'_>,
    with_grad: bool,
) -> Result<(f64, EncoderGrad)> {
    objective_impl(xs, params, spec, with_grad)
}

fn objective_impl(
    xs: &[Vec<f64>],
    params: &EncoderParams,
    spec: ObjectiveSpec<'_>,
    with_grad: bool,
) -> Result<(f64, EncoderGrad)> {
    let p = params.input_dim;
    let n = xs.len();
    if spec.weights.len() != n {
        return Err(Error::Shape(format!(
            "{} responsibilities for {n} rows",
            spec.weights.len()
        )));
    }
    if let Some(x) = xs.iter().find(|x| x.len() != p) {
        return Err(Error::Shape(format!("row of length {} for encoder input {p}", x.len())));
    }
    let mut grad = if with_grad {
        vec![0.0; params.theta.len()]
    } else {
        Vec::new()
    };
    // one forward pass suffices when the value alone is needed and the
    // encoding does not depend on the input
    let forwards: Vec<Forward> = if !with_grad && n > 0 && params.is_input_independent() {
        vec![params.forward(&xs[0])?]
    } else {
        xs.iter().map(|x| params.forward(x)).collect::<Result<_>>()?
    };
    let fwd = |j: usize| &forwards[j.min(forwards.len() - 1)];

    let mut value = 0.0;
    // prior gradient contributions, shared by every row
    let mut prior_dmean = vec![0.0; p];
    let mut prior_dsigma = vec![0.0; p * p];
    if let (Some(prior), true) = (spec.prior, n > 0) {
        if prior.dim() != p {
            return Err(Error::Shape(format!("prior of dim {} for encoder dim {p}", prior.dim())));
        }
        let nf = n as f64;
        let mut mean_bar = DVector::zeros(p);
        let mut sigma_bar = DMatrix::zeros(p, p);
        for f in &forwards {
            for i in 0..p {
                mean_bar[i] += f.out[i];
            }
            let l = DMatrix::from_row_slice(p, p, &f.l);
            sigma_bar += &l * l.transpose();
        }
        mean_bar /= forwards.len() as f64;
        sigma_bar /= forwards.len() as f64;
        let sigma = cholesky(&sigma_bar)?;
        value += crate::distributions::niw_logpdf(&mean_bar, &sigma, prior)?;
        if with_grad {
            let sinv = sigma.inverse();
            let e = &mean_bar - &prior.m;
            let se = &sinv * &e;
            let vinv = prior.v.inverse();
            let k = prior.kappa;
            let g = &sinv * (-0.5 * (k - p as f64))
                + &se * se.transpose() * (k / 2.0)
                + &sinv * vinv * &sinv * 0.5;
            for i in 0..p {
                prior_dmean[i] = -k * se[i] / nf;
                for j in 0..p {
                    prior_dsigma[i * p + j] = 0.5 * (g[(i, j)] + g[(j, i)]) * 2.0 / nf;
                }
            }
        }
    }

    for (j, x) in xs.iter().enumerate() {
        let f = fwd(j);
        let w = spec.weights[j];
        let mut dmean = prior_dmean.clone();
        let mut dl = vec![0.0; p * p];
        if w != 0.0 {
            let z = f.whiten(x, p);
            let half_logdet: f64 = (0..p).map(|i| f.l[i * p + i].ln()).sum();
            let logpdf = -0.5 * (p as f64 * LN_2PI + z.iter().map(|v| v * v).sum::<f64>()) - half_logdet;
            let entropy = 0.5 * p as f64 * (1.0 + LN_2PI) + half_logdet;
            value += w * (logpdf + spec.entropy_weight * entropy);
            if with_grad {
                let a = f.back_solve(&z, p);
                for i in 0..p {
                    dmean[i] += w * a[i];
                    for c in 0..=i {
                        dl[i * p + c] += w * a[i] * z[c];
                    }
                    dl[i * p + i] += w * (spec.entropy_weight - 1.0) / f.l[i * p + i];
                }
            }
        }
        if with_grad {
            if spec.prior.is_some() {
                // d/dL_j of Sigma_bar term: (2/n) G L_j, folded into prior_dsigma
                for r in 0..p {
                    for c in 0..=r {
                        let mut s = 0.0;
                        for k in 0..p {
                            s += prior_dsigma[r * p + k] * f.l[k * p + c];
                        }
                        dl[r * p + c] += s;
                    }
                }
            }
            params.backward(x, f, &dmean, &dl, &mut grad);
        }
    }
    Ok((value, grad))
}

/// Plain gradient ascent step with norm clipping.
pub fn ascent_step(params: &mut EncoderParams, grad: &[f64], lr: f64, clip: f64) {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    let scale = if norm > clip && norm > 0.0 { clip / norm } else { 1.0 };
    for (t, g) in params.theta.iter_mut().zip(grad) {
        *t += lr * scale * g;
    }
}
