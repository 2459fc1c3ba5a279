//! Truncated variational DP Gaussian mixture with encoder-produced components.
//!
//! One fitting iteration runs, in order: the stick update from the current
//! responsibilities, the responsibility update, the ELBO, and then an update
//! of every component's encoder. The stick and responsibility updates are
//! exact coordinate maximizers of the ELBO, so with frozen encoders the ELBO
//! never decreases.
//!
//! The ELBO is
//!
//! ```text
//!   sum_jt phi_jt (E[ln pi_t] + l_jt) + H[phi] - KL(q(beta) || p(beta))
//!   + sum_t niw_logpdf(mean_j mu_t(x_j), mean_j Sigma_t(x_j))
//!   - sum_{labeled j} KL(phi_j || smoothed_one_hot(y_j))
//! ```
//!
//! with `l_jt = log N(x_j; encode_t(x_j)) + entropy_weight * H[encode_t(x_j)]`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::distributions::{kl_categorical, smoothed_one_hot, GaussianParams, NIWParams};
use crate::encoder::{ascent_step, objective_rows, EncoderParams, ObjectiveSpec};
use crate::special_math::{cholesky, log_sum_exp, SpdMatrix};
use crate::stick_breaking::{expected_log_pi, update_gamma, StickPosterior};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub max_iters: usize,
    pub rel_tol: f64,
    pub lr: f64,
    pub grad_clip: f64,
    pub seed: u64,
    pub inner_grad_steps: usize,
    /// Weight of the component entropy inside the responsibility logits.
    pub entropy_weight: f64,
    /// Refit the output-layer biases to their conditional optimum each
    /// iteration before the gradient steps.
    pub closed_form_heads: bool,
    /// Let gradient steps move the hidden layer and output weights too.
    /// Otherwise only the output biases move and every component is a
    /// fixed Gaussian.
    pub train_network: bool,
    pub update_encoders: bool,
    /// Try merging overlapping components at convergence and every
    /// `merge_every` iterations; a merge is kept only if it raises the ELBO.
    pub merge_moves: bool,
    pub merge_every: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            max_iters: 200,
            rel_tol: 1e-6,
            lr: 1e-3,
            grad_clip: 10.0,
            seed: 0,
            inner_grad_steps: 1,
            entropy_weight: 0.0,
            closed_form_heads: true,
            train_network: false,
            update_encoders: true,
            merge_moves: true,
            merge_every: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DPMixtureState {
    /// Log responsibilities, one normalized row per observation.
    pub log_phi: DMatrix<f64>,
    pub sticks: StickPosterior,
    pub encoders: Vec<EncoderParams>,
    pub prior: NIWParams,
    pub eta: f64,
    pub converged: bool,
    pub iterations: usize,
    pub elbo_trace: Vec<f64>,
}

impl DPMixtureState {
    pub fn truncation(&self) -> usize {
        self.encoders.len()
    }

    pub fn dim(&self) -> usize {
        self.prior.dim()
    }

    pub fn phi(&self) -> DMatrix<f64> {
        self.log_phi.map(f64::exp)
    }

    /// Expected number of observations per component.
    pub fn occupancy(&self) -> Vec<f64> {
        let phi = self.phi();
        (0..phi.ncols()).map(|c| phi.column(c).sum()).collect()
    }

    /// Number of components that are the argmax of at least one row.
    pub fn occupied_count(&self) -> usize {
        let mut seen = vec![false; self.truncation()];
        for a in self.assignments() {
            seen[a] = true;
        }
        seen.iter().filter(|s| **s).count()
    }

    /// Row-wise argmax of the responsibilities, lowest index on ties.
    pub fn assignments(&self) -> Vec<usize> {
        self.log_phi.row_iter().map(|r| argmax(r.iter().copied())).collect()
    }

    /// Mean responsibility of each component over the fitted rows.
    pub fn mixing_weights(&self) -> Vec<f64> {
        let n = self.log_phi.nrows().max(1) as f64;
        self.occupancy().iter().map(|m| m / n).collect()
    }
}

pub(crate) fn argmax(it: impl Iterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, v) in it.enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

pub(crate) fn matrix_rows(x: &DMatrix<f64>) -> Vec<Vec<f64>> {
    x.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// NIW prior centred on the data mean whose mode covariance equals the
/// per-dimension data variance, so empty components sit broadly over the
/// data instead of competing with fitted clusters.
pub fn empirical_prior(x: &DMatrix<f64>) -> Result<NIWParams> {
    let n = x.nrows();
    let p = x.ncols();
    if n == 0 || p == 0 {
        return Err(Error::Shape("empirical prior needs data".into()));
    }
    let kappa = p as f64 + 2.0;
    let m: DVector<f64> = x.row_mean().transpose();
    let diag: Vec<f64> = (0..p)
        .map(|c| {
            let var = x.column(c).iter().map(|v| (v - m[c]).powi(2)).sum::<f64>() / n as f64;
            1.0 / ((kappa - p as f64) * var.max(1e-6))
        })
        .collect();
    NIWParams::new(m, kappa, SpdMatrix::from_diagonal(&diag)?)
}

fn check_labels(labels: Option<&[Option<usize>]>, n: usize, t: usize) -> Result<()> {
    if let Some(l) = labels {
        if l.len() != n {
            return Err(Error::Shape(format!("{} labels for {n} rows", l.len())));
        }
        if let Some(bad) = l.iter().flatten().find(|y| **y >= t) {
            return Err(Error::Config(format!(
                "label {bad} has no matching component (truncation {t})"
            )));
        }
    }
    Ok(())
}

/// Initial state: near-uniform responsibilities and seeded encoders.
///
/// Encoder output biases place the component means at k-means++ seeds
/// drawn from the rows (or, for labeled rows, at the class means) with an
/// isotropic covariance at the data scale.
pub fn init_state(
    x: &DMatrix<f64>,
    truncation: usize,
    eta: f64,
    prior: NIWParams,
    hidden: usize,
    seed: u64,
    labels: Option<&[Option<usize>]>,
) -> Result<DPMixtureState> {
    let n = x.nrows();
    let p = x.ncols();
    if n == 0 {
        return Err(Error::Shape("cannot fit a mixture to zero rows".into()));
    }
    if truncation == 0 {
        return Err(Error::Config("truncation level must be at least 1".into()));
    }
    if prior.dim() != p {
        return Err(Error::Shape(format!("prior of dim {} for data of dim {p}", prior.dim())));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite feature value".into()));
    }
    check_labels(labels, n, truncation)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut phi = DMatrix::from_fn(n, truncation, |_, _| 1.0 / truncation as f64 + 1e-3 * rng.random::<f64>());
    for mut r in phi.row_iter_mut() {
        let s = r.sum();
        r /= s;
    }
    let rows = matrix_rows(x);

    let centers = seed_centers(&rows, truncation, labels, &mut rng);
    let mean = x.row_mean();
    let var = (0..p)
        .map(|c| x.column(c).iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>() / n as f64)
        .sum::<f64>()
        / p as f64;
    let scale = (var / truncation as f64).max(1e-2);
    let row_refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
    let mut encoders = Vec::with_capacity(truncation);
    for c in centers {
        let mut e = EncoderParams::init(p, hidden, &mut rng);
        let target = GaussianParams::new(
            DVector::from_vec(c),
            SpdMatrix::from_diagonal(&vec![scale; p])?,
        )?;
        e.set_output_bias(&row_refs, &target)?;
        encoders.push(e);
    }
    Ok(DPMixtureState {
        log_phi: phi.map(f64::ln),
        sticks: StickPosterior::prior(truncation, eta)?,
        encoders,
        prior,
        eta,
        converged: false,
        iterations: 0,
        elbo_trace: Vec::new(),
    })
}

fn seed_centers(
    rows: &[Vec<f64>],
    k: usize,
    labels: Option<&[Option<usize>]>,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<f64>> {
    let p = rows[0].len();
    let mut centers: Vec<Option<Vec<f64>>> = vec![None; k];
    if let Some(labels) = labels {
        let mut sums = vec![vec![0.0; p]; k];
        let mut counts = vec![0usize; k];
        for (r, y) in rows.iter().zip(labels) {
            if let Some(y) = y {
                counts[*y] += 1;
                for (s, v) in sums[*y].iter_mut().zip(r) {
                    *s += v;
                }
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = Some(sums[c].iter().map(|s| s / counts[c] as f64).collect());
            }
        }
    }
    let dist2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    let mut chosen: Vec<Vec<f64>> = centers.iter().flatten().cloned().collect();
    for slot in centers.iter_mut() {
        if slot.is_some() {
            continue;
        }
        let pick = if chosen.is_empty() {
            rng.random_range(0..rows.len())
        } else {
            let d: Vec<f64> = rows
                .iter()
                .map(|r| chosen.iter().map(|c| dist2(r, c)).fold(f64::INFINITY, f64::min))
                .collect();
            let total: f64 = d.iter().sum();
            if total <= 0.0 {
                rng.random_range(0..rows.len())
            } else {
                let mut u = rng.random::<f64>() * total;
                let mut idx = rows.len() - 1;
                for (i, di) in d.iter().enumerate() {
                    if u < *di {
                        idx = i;
                        break;
                    }
                    u -= di;
                }
                idx
            }
        };
        chosen.push(rows[pick].clone());
        *slot = Some(rows[pick].clone());
    }
    centers.into_iter().map(|c| c.expect("all slots filled")).collect()
}

/// `l_jt` and the component entropies, each an `n x T` matrix.
fn component_terms(rows: &[Vec<f64>], encoders: &[EncoderParams]) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = rows.len();
    let t = encoders.len();
    let mut ll = DMatrix::zeros(n, t);
    let mut ent = DMatrix::zeros(n, t);
    for (c, e) in encoders.iter().enumerate() {
        let (l, h) = e.batch_density_and_entropy(rows)?;
        for j in 0..n {
            if !l[j].is_finite() {
                return Err(Error::Numeric(format!("non-finite log-density at row {j}, component {c}")));
            }
            ll[(j, c)] = l[j];
            ent[(j, c)] = h[j];
        }
    }
    Ok((ll, ent))
}

fn logits(
    rows: &[Vec<f64>],
    state: &DPMixtureState,
    entropy_weight: f64,
) -> Result<DMatrix<f64>> {
    let elp = expected_log_pi(&state.sticks)?;
    let (ll, ent) = component_terms(rows, &state.encoders)?;
    Ok(DMatrix::from_fn(rows.len(), state.truncation(), |j, c| {
        elp[c] + ll[(j, c)] + entropy_weight * ent[(j, c)]
    }))
}

fn responsibilities_from_logits(
    logits: &DMatrix<f64>,
    labels: Option<&[Option<usize>]>,
) -> DMatrix<f64> {
    let t = logits.ncols();
    let mut out = logits.clone();
    for (j, mut row) in out.row_iter_mut().enumerate() {
        if let Some(y) = labels.and_then(|l| l[j]) {
            let target = smoothed_one_hot(y, t);
            for c in 0..t {
                row[c] = 0.5 * (row[c] + target[c].ln());
            }
        }
        let v: Vec<f64> = row.iter().copied().collect();
        let lse = log_sum_exp(&v);
        for c in 0..t {
            row[c] -= lse;
        }
    }
    out
}

/// New log responsibilities given the current sticks and encoders.
///
/// Unlabeled rows get `log phi_jt = E[ln pi_t] + l_jt` normalized by
/// log-sum-exp; labeled rows additionally absorb the supervised KL term,
/// which halves the logits and adds `ln y_jt / 2`.
pub fn update_responsibilities(
    x: &DMatrix<f64>,
    state: &DPMixtureState,
    labels: Option<&[Option<usize>]>,
    entropy_weight: f64,
) -> Result<DMatrix<f64>> {
    check_labels(labels, x.nrows(), state.truncation())?;
    let rows = matrix_rows(x);
    let lg = logits(&rows, state, entropy_weight)?;
    Ok(responsibilities_from_logits(&lg, labels))
}

/// Individual ELBO contributions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboTerms {
    pub expected_loglik: f64,
    pub expected_log_pi: f64,
    pub assignment_entropy: f64,
    pub kl_sticks: f64,
    pub prior_term: f64,
    pub supervised_kl: f64,
}

impl ElboTerms {
    pub fn total(&self) -> f64 {
        self.expected_loglik + self.expected_log_pi + self.assignment_entropy - self.kl_sticks + self.prior_term
            - self.supervised_kl
    }
}

fn batch_average_gaussian(rows: &[Vec<f64>], e: &EncoderParams) -> Result<(DVector<f64>, SpdMatrix)> {
    let p = e.input_dim();
    if e.is_input_independent() {
        let g = e.encode(&rows[0])?;
        return Ok((g.mean, g.cov));
    }
    let n = rows.len() as f64;
    let mut mean = DVector::zeros(p);
    let mut cov = DMatrix::zeros(p, p);
    for x in rows {
        let g = e.encode(x)?;
        mean += &g.mean / n;
        cov += g.cov.to_dense() / n;
    }
    Ok((mean, cholesky(&cov)?))
}

pub fn elbo_terms(
    x: &DMatrix<f64>,
    state: &DPMixtureState,
    labels: Option<&[Option<usize>]>,
    entropy_weight: f64,
) -> Result<ElboTerms> {
    let n = x.nrows();
    let t = state.truncation();
    if state.log_phi.nrows() != n || state.log_phi.ncols() != t {
        return Err(Error::Shape(format!(
            "responsibilities are {}x{}, data has {n} rows and {t} components",
            state.log_phi.nrows(),
            state.log_phi.ncols()
        )));
    }
    check_labels(labels, n, t)?;
    let rows = matrix_rows(x);
    let (ll, ent) = component_terms(&rows, &state.encoders)?;
    let elp = expected_log_pi(&state.sticks)?;
    let mut terms = ElboTerms {
        expected_loglik: 0.0,
        expected_log_pi: 0.0,
        assignment_entropy: 0.0,
        kl_sticks: state.sticks.kl_to_prior()?,
        prior_term: 0.0,
        supervised_kl: 0.0,
    };
    for j in 0..n {
        for c in 0..t {
            let lp = state.log_phi[(j, c)];
            let ph = lp.exp();
            if ph == 0.0 {
                continue;
            }
            terms.expected_loglik += ph * (ll[(j, c)] + entropy_weight * ent[(j, c)]);
            terms.expected_log_pi += ph * elp[c];
            terms.assignment_entropy -= ph * lp;
        }
        if let Some(y) = labels.and_then(|l| l[j]) {
            let q: Vec<f64> = state.log_phi.row(j).iter().map(|v| v.exp()).collect();
            let s: f64 = q.iter().sum();
            let q: Vec<f64> = q.iter().map(|v| v / s).collect();
            terms.supervised_kl += kl_categorical(&q, &smoothed_one_hot(y, t))?;
        }
    }
    for e in &state.encoders {
        let (m, s) = batch_average_gaussian(&rows, e)?;
        terms.prior_term += crate::distributions::niw_logpdf(&m, &s, &state.prior)?;
    }
    Ok(terms)
}

pub fn compute_elbo(
    x: &DMatrix<f64>,
    state: &DPMixtureState,
    labels: Option<&[Option<usize>]>,
    entropy_weight: f64,
) -> Result<f64> {
    Ok(elbo_terms(x, state, labels, entropy_weight)?.total())
}

/// One coordinate sweep: stick update then responsibility update.
pub fn coordinate_sweep(
    x: &DMatrix<f64>,
    state: &mut DPMixtureState,
    labels: Option<&[Option<usize>]>,
    entropy_weight: f64,
) -> Result<()> {
    state.sticks = update_gamma(&state.phi(), state.eta)?;
    state.log_phi = update_responsibilities(x, state, labels, entropy_weight)?;
    Ok(())
}

/// Closed-form conditional optimum of a component's output biases.
///
/// With the hidden-layer contribution held fixed, the mean bias solves a
/// weighted least-squares problem shrunk toward the prior mean, and the
/// covariance is the NIW-regularized weighted scatter of the residuals.
fn closed_form_target(
    rows: &[Vec<f64>],
    weights: &[f64],
    e: &EncoderParams,
    prior: &NIWParams,
    entropy_weight: f64,
) -> Result<Option<GaussianParams>> {
    let p = e.input_dim();
    let n = rows.len();
    let mass: f64 = weights.iter().sum();
    let kappa = prior.kappa;
    // new means are mu_j = bias + d_j with d_j the current deviation of
    // row j from the batch-average mean (zero for input-independent encoders)
    let devs: Option<Vec<DVector<f64>>> = if e.is_input_independent() {
        None
    } else {
        let means: Vec<DVector<f64>> = rows.iter().map(|x| e.encode(x).map(|g| g.mean)).collect::<Result<_>>()?;
        let bar = means.iter().fold(DVector::zeros(p), |a, m| a + m) / n as f64;
        Some(means.into_iter().map(|m| m - &bar).collect())
    };
    let dev = |j: usize, i: usize| devs.as_ref().map_or(0.0, |d| d[j][i]);
    let mut bias = &prior.m * kappa;
    for (j, (x, w)) in rows.iter().zip(weights).enumerate() {
        for i in 0..p {
            bias[i] += w * (x[i] - dev(j, i));
        }
    }
    bias /= mass + kappa;
    let mut scatter = prior.v.inverse();
    let mut r = vec![0.0; p];
    for (j, (x, w)) in rows.iter().zip(weights).enumerate() {
        if *w == 0.0 {
            continue;
        }
        for i in 0..p {
            r[i] = x[i] - bias[i] - dev(j, i);
        }
        for a in 0..p {
            for b in 0..=a {
                scatter[(a, b)] += w * r[a] * r[b];
            }
        }
    }
    let e_dev = &bias - &prior.m;
    for a in 0..p {
        for b in 0..=a {
            scatter[(a, b)] += kappa * e_dev[a] * e_dev[b];
        }
    }
    for a in 0..p {
        for b in 0..a {
            scatter[(b, a)] = scatter[(a, b)];
        }
    }
    let denom = (1.0 - entropy_weight) * mass + kappa - p as f64;
    if !(denom > 0.0) {
        return Ok(None);
    }
    let cov = match cholesky(&(scatter / denom)) {
        Ok(c) => c,
        Err(_) => return Ok(None),
    };
    Ok(Some(GaussianParams::new(bias, cov)?))
}

/// Encoder update for the current responsibilities, as run once per
/// fitting iteration.
pub fn refit_components(x: &DMatrix<f64>, state: &mut DPMixtureState, config: &FitConfig) -> Result<()> {
    update_encoders(&matrix_rows(x), state, config)
}

fn update_encoders(
    rows: &[Vec<f64>],
    state: &mut DPMixtureState,
    config: &FitConfig,
) -> Result<()> {
    let phi = state.phi();
    let row_refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
    for c in 0..state.truncation() {
        let weights: Vec<f64> = phi.column(c).iter().copied().collect();
        let spec = ObjectiveSpec {
            weights: &weights,
            prior: Some(&state.prior),
            entropy_weight: config.entropy_weight,
        };
        let mut at_optimum = false;
        if config.closed_form_heads {
            let before = objective_rows(rows, &state.encoders[c], spec, false)?.0;
            if let Some(target) = closed_form_target(rows, &weights, &state.encoders[c], &state.prior, config.entropy_weight)? {
                let mut candidate = state.encoders[c].clone();
                candidate.set_output_bias(&row_refs, &target)?;
                if let Ok((after, _)) = objective_rows(rows, &candidate, spec, false) {
                    if after >= before {
                        state.encoders[c] = candidate;
                        // the biases are already at their conditional optimum
                        at_optimum = !config.train_network && state.encoders[c].is_input_independent();
                    }
                }
            }
        }
        let steps = if at_optimum { 0 } else { config.inner_grad_steps };
        for _ in 0..steps {
            let (_, mut grad) = objective_rows(rows, &state.encoders[c], spec, true)?;
            if !config.train_network {
                let heads = grad.len() - state.encoders[c].output_dim();
                grad[..heads].fill(0.0);
            }
            let mut candidate = state.encoders[c].clone();
            ascent_step(&mut candidate, &grad, config.lr, config.grad_clip);
            // a step that breaks the factorization is dropped
            if objective_rows(rows, &candidate, spec, false).is_ok() {
                state.encoders[c] = candidate;
            }
        }
    }
    Ok(())
}

/// Fits the mixture starting from `state`, returning the final state.
///
/// Stops when the relative ELBO change falls below `config.rel_tol` or after
/// `config.max_iters` iterations; in the latter case `converged` is false.
pub fn fit_dp(
    x: &DMatrix<f64>,
    mut state: DPMixtureState,
    config: &FitConfig,
    labels: Option<&[Option<usize>]>,
) -> Result<DPMixtureState> {
    let n = x.nrows();
    if n == 0 {
        return Err(Error::Shape("cannot fit a mixture to zero rows".into()));
    }
    if x.ncols() != state.dim() {
        return Err(Error::Shape(format!("data of dim {} for mixture of dim {}", x.ncols(), state.dim())));
    }
    if state.log_phi.nrows() != n {
        return Err(Error::Shape(format!(
            "state holds {} responsibility rows for {n} observations",
            state.log_phi.nrows()
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite feature value".into()));
    }
    check_labels(labels, n, state.truncation())?;
    let rows = matrix_rows(x);
    state.converged = false;
    state.elbo_trace.clear();
    let mut prev: Option<f64> = None;
    for iter in 0..config.max_iters {
        coordinate_sweep(x, &mut state, labels, config.entropy_weight)?;
        let elbo = compute_elbo(x, &state, labels, config.entropy_weight)?;
        state.elbo_trace.push(elbo);
        state.iterations = iter + 1;
        let settled = prev.is_some_and(|p| (elbo - p).abs() <= config.rel_tol * p.abs().max(1.0));
        let can_merge = config.merge_moves && config.update_encoders;
        if can_merge && (settled || (iter + 1) % config.merge_every.max(1) == 0) {
            if let Some(merged) = best_merge(x, &rows, &state, config, labels)? {
                state = merged;
                prev = None;
                continue;
            }
        }
        if settled {
            state.converged = true;
            break;
        }
        prev = Some(elbo);
        if config.update_encoders {
            update_encoders(&rows, &mut state, config)?;
        }
    }
    Ok(state)
}

const MERGE_REFINE_STEPS: usize = 3;
const MAX_MERGE_CANDIDATES: usize = 8;

fn refine(
    x: &DMatrix<f64>,
    rows: &[Vec<f64>],
    mut state: DPMixtureState,
    config: &FitConfig,
    labels: Option<&[Option<usize>]>,
) -> Result<(DPMixtureState, f64)> {
    for _ in 0..MERGE_REFINE_STEPS {
        update_encoders(rows, &mut state, config)?;
        coordinate_sweep(x, &mut state, labels, config.entropy_weight)?;
    }
    let e = compute_elbo(x, &state, labels, config.entropy_weight)?;
    Ok((state, e))
}

/// Greedy merge move: folds the responsibilities of one component into
/// another for the most overlapping pairs and returns the first candidate
/// whose refined ELBO beats an equally refined copy of the current state.
fn best_merge(
    x: &DMatrix<f64>,
    rows: &[Vec<f64>],
    state: &DPMixtureState,
    config: &FitConfig,
    labels: Option<&[Option<usize>]>,
) -> Result<Option<DPMixtureState>> {
    let phi = state.phi();
    let mass = state.occupancy();
    let t = state.truncation();
    let live: Vec<usize> = (0..t).filter(|c| mass[*c] > 1e-6).collect();
    let mut pairs = Vec::new();
    for (i, &a) in live.iter().enumerate() {
        for &b in &live[i + 1..] {
            let overlap: f64 = phi.column(a).dot(&phi.column(b)) / mass[a].min(mass[b]);
            if overlap > 1e-3 {
                pairs.push((overlap, a, b));
            }
        }
    }
    if pairs.is_empty() {
        return Ok(None);
    }
    pairs.sort_by(|p, q| q.0.total_cmp(&p.0).then((p.1, p.2).cmp(&(q.1, q.2))));
    pairs.truncate(MAX_MERGE_CANDIDATES);
    let (_, base) = refine(x, rows, state.clone(), config, labels)?;
    for (_, a, b) in pairs {
        // the heavier component absorbs the lighter one
        let (keep, drop) = if mass[a] >= mass[b] { (a, b) } else { (b, a) };
        let mut cand = state.clone();
        let mut merged = phi.clone();
        for j in 0..merged.nrows() {
            merged[(j, keep)] += merged[(j, drop)];
            merged[(j, drop)] = 0.0;
        }
        cand.log_phi = merged.map(f64::ln);
        cand.sticks = update_gamma(&merged, cand.eta)?;
        let (cand, e) = match refine(x, rows, cand, config, labels) {
            Ok(r) => r,
            Err(Error::Numeric(_)) | Err(Error::NotPositiveDefinite { .. }) => continue,
            Err(e) => return Err(e),
        };
        if e > base + 1e-9 * base.abs().max(1.0) {
            return Ok(Some(cand));
        }
    }
    Ok(None)
}

/// `p(z = t | x)`: expected stick weights times the component density at
/// the encoded parameters, normalized over components.
pub fn posterior_predictive(x: &[f64], state: &DPMixtureState) -> Result<Vec<f64>> {
    if x.len() != state.dim() {
        return Err(Error::Shape(format!("input of dim {} for mixture of dim {}", x.len(), state.dim())));
    }
    let w = state.sticks.expected_weights();
    let logs: Vec<f64> = state
        .encoders
        .iter()
        .zip(&w)
        .map(|(e, wt)| Ok(wt.ln() + e.self_log_density(x)?))
        .collect::<Result<_>>()?;
    let lse = log_sum_exp(&logs);
    Ok(logs.iter().map(|l| (l - lse).exp()).collect())
}

/// ELBO trace as `iteration,elbo` lines with a header.
pub fn elbo_trace_table(trace: &[f64]) -> String {
    let mut s = String::from("iteration,elbo\n");
    for (i, v) in trace.iter().enumerate() {
        s.push_str(&format!("{},{:.10e}\n", i + 1, v));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::mvn_logpdf;
    use approx::assert_abs_diff_eq;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian_blobs(centers: &[Vec<f64>], per: usize, seed: u64) -> (DMatrix<f64>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = centers[0].len();
        let n = centers.len() * per;
        let mut x = DMatrix::zeros(n, p);
        let mut truth = Vec::with_capacity(n);
        for (k, c) in centers.iter().enumerate() {
            for i in 0..per {
                for d in 0..p {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    x[(k * per + i, d)] = c[d] + z;
                }
                truth.push(k);
            }
        }
        (x, truth)
    }

    fn fixed_component(mean: f64) -> EncoderParams {
        let mut e = EncoderParams::zeros(1, 2);
        let g = GaussianParams::new(DVector::from_vec(vec![mean]), SpdMatrix::identity(1)).unwrap();
        e.set_output_bias(&[], &g).unwrap();
        e
    }

    fn fixed_state(means: &[f64], n: usize) -> DPMixtureState {
        let t = means.len();
        DPMixtureState {
            log_phi: DMatrix::from_element(n, t, -(t as f64).ln()),
            sticks: StickPosterior::prior(t, 1.0).unwrap(),
            encoders: means.iter().map(|m| fixed_component(*m)).collect(),
            prior: NIWParams::default_for_dim(1),
            eta: 1.0,
            converged: false,
            iterations: 0,
            elbo_trace: vec![],
        }
    }

    #[test]
    fn single_component_takes_everything() {
        let x = DMatrix::from_row_slice(3, 1, &[0.0, 5.0, -2.0]);
        let s = fixed_state(&[0.0], 3);
        let lp = update_responsibilities(&x, &s, None, 0.0).unwrap();
        assert!(lp.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn identical_components_split_evenly() {
        let x = DMatrix::from_row_slice(2, 1, &[0.3, -1.0]);
        let mut s = fixed_state(&[1.0, 1.0], 2);
        s.sticks = StickPosterior { gamma1: vec![1.0, 1.0], gamma2: vec![1.0, 1.0], eta: 1.0 };
        let phi = update_responsibilities(&x, &s, None, 0.0).unwrap().map(f64::exp);
        for v in phi.iter() {
            assert_abs_diff_eq!(*v, 0.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn far_component_gets_negligible_mass() {
        let x = DMatrix::from_row_slice(1, 1, &[0.0]);
        let mut s = fixed_state(&[0.0, 10.0], 1);
        s.sticks = StickPosterior { gamma1: vec![1.0, 1.0], gamma2: vec![1.0, 1.0], eta: 1.0 };
        let lp = update_responsibilities(&x, &s, None, 0.0).unwrap();
        // log ratio is exactly -50 for unit variances at distance 10
        assert_abs_diff_eq!(lp[(0, 1)] - lp[(0, 0)], -50.0, epsilon = 1e-9);
        assert!(lp[(0, 1)].exp() < 1e-20);
        assert_abs_diff_eq!(lp[(0, 0)].exp(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn entropy_weight_enters_logits() {
        // unequal covariances: entropy cancels the log-determinant difference
        let x = DMatrix::from_row_slice(1, 1, &[0.0]);
        let mut s = fixed_state(&[0.0, 0.0], 1);
        let wide = GaussianParams::new(DVector::from_vec(vec![0.0]), SpdMatrix::from_diagonal(&[9.0]).unwrap()).unwrap();
        s.encoders[1].set_output_bias(&[], &wide).unwrap();
        s.sticks = StickPosterior { gamma1: vec![1.0, 1.0], gamma2: vec![1.0, 1.0], eta: 1.0 };
        let with = update_responsibilities(&x, &s, None, 1.0).unwrap();
        assert_abs_diff_eq!(with[(0, 0)], with[(0, 1)], epsilon = 1e-3);
        let without = update_responsibilities(&x, &s, None, 0.0).unwrap();
        assert!(without[(0, 0)] > without[(0, 1)] + 1.0);
    }

    #[test]
    fn elbo_matches_termwise_sum() {
        let x = DMatrix::from_row_slice(3, 1, &[-0.4, 0.9, 2.2]);
        let mut s = fixed_state(&[0.0, 1.5], 3);
        s.log_phi = DMatrix::from_row_slice(3, 2, &[0.7, 0.3, 0.4, 0.6, 0.1, 0.9]).map(f64::ln);
        s.sticks = update_gamma(&s.phi(), 1.0).unwrap();
        let labels = [Some(0), None, Some(1)];
        let got = compute_elbo(&x, &s, Some(&labels), 0.0).unwrap();

        // independent term-by-term evaluation
        let phi = [[0.7, 0.3], [0.4, 0.6], [0.1, 0.9]];
        let g1 = s.sticks.gamma1.clone();
        let g2 = s.sticks.gamma2.clone();
        let dg = |v: f64| crate::special_math::digamma(v).unwrap();
        let elp = [dg(g1[0]) - dg(g1[0] + g2[0]), dg(g2[0]) - dg(g1[0] + g2[0])];
        let comps = [0.0, 1.5];
        let mut want = 0.0;
        for j in 0..3 {
            for c in 0..2 {
                let g = GaussianParams::new(DVector::from_vec(vec![comps[c]]), SpdMatrix::identity(1)).unwrap();
                let ll = mvn_logpdf(&DVector::from_vec(vec![x[(j, 0)]]), &g).unwrap();
                want += phi[j][c] * (elp[c] + ll) - phi[j][c] * phi[j][c].ln();
            }
        }
        let prior_beta = crate::distributions::BetaParams::new(1.0, 1.0).unwrap();
        want -= crate::distributions::kl_beta(&crate::distributions::BetaParams::new(g1[0], g2[0]).unwrap(), &prior_beta).unwrap();
        for m in comps {
            want += crate::distributions::niw_logpdf(
                &DVector::from_vec(vec![m]),
                &SpdMatrix::identity(1),
                &NIWParams::default_for_dim(1),
            )
            .unwrap();
        }
        let eps = crate::distributions::LABEL_SMOOTHING;
        want -= 0.7 * (0.7 / (1.0 - eps)).ln() + 0.3 * (0.3 / eps).ln();
        want -= 0.1 * (0.1 / eps).ln() + 0.9 * (0.9 / (1.0 - eps)).ln();
        assert_abs_diff_eq!(got, want, epsilon = 1e-8);
    }

    #[test]
    fn prior_matching_posterior_has_no_kl_penalty() {
        let x = DMatrix::from_row_slice(4, 1, &[0.1, -0.2, 0.3, 0.0]);
        let s = fixed_state(&[0.0, 0.0, 0.0], 4);
        let terms = elbo_terms(&x, &s, None, 0.0).unwrap();
        assert!(terms.kl_sticks.abs() <= 1e-8);
        assert_eq!(terms.supervised_kl, 0.0);
    }

    #[test]
    fn sweeps_never_decrease_elbo() {
        let (x, _) = gaussian_blobs(&[vec![0.0, 0.0], vec![4.0, 1.0]], 30, 3);
        let prior = NIWParams::default_for_dim(2);
        let mut s = init_state(&x, 5, 1.0, prior, 4, 1, None).unwrap();
        let mut last = compute_elbo(&x, &s, None, 0.0).unwrap();
        for _ in 0..30 {
            coordinate_sweep(&x, &mut s, None, 0.0).unwrap();
            let e = compute_elbo(&x, &s, None, 0.0).unwrap();
            assert!(e >= last - 1e-8, "{e} < {last}");
            last = e;
        }
    }

    #[test]
    fn responsibilities_are_normalized() {
        let (x, _) = gaussian_blobs(&[vec![0.0, 0.0], vec![5.0, 5.0]], 20, 8);
        let s = init_state(&x, 4, 1.0, NIWParams::default_for_dim(2), 4, 2, None).unwrap();
        let lp = update_responsibilities(&x, &s, None, 0.0).unwrap();
        for r in lp.row_iter() {
            let s: f64 = r.iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    fn ari(a: &[usize], b: &[usize]) -> f64 {
        crate::evaluation::adjusted_rand_index(a, b)
    }

    #[test]
    fn recovers_two_separated_clusters() {
        let (x, truth) = gaussian_blobs(&[vec![0.0, 0.0], vec![10.0, 0.0]], 100, 21);
        let prior = empirical_prior(&x).unwrap();
        let s = init_state(&x, 8, 1.0, prior, 4, 5, None).unwrap();
        let fit = fit_dp(&x, s, &FitConfig::default(), None).unwrap();
        assert_eq!(fit.occupied_count(), 2, "occupancy {:?}", fit.occupancy());
        assert_abs_diff_eq!(ari(&fit.assignments(), &truth), 1.0, epsilon = 1e-12);

        // predictive at a cluster centre
        let labels = fit.assignments();
        let p = posterior_predictive(&[0.0, 0.0], &fit).unwrap();
        assert!(p[labels[0]] >= 0.95, "{p:?} {:?}", fit.sticks.expected_weights());
    }

    #[test]
    fn single_row_fit() {
        let x = DMatrix::from_row_slice(1, 2, &[1.0, -1.0]);
        let s = init_state(&x, 5, 1.0, empirical_prior(&x).unwrap(), 4, 0, None).unwrap();
        let fit = fit_dp(&x, s, &FitConfig::default(), None).unwrap();
        assert_eq!(fit.occupied_count(), 1);
        let phi = fit.phi();
        assert!((phi.row(0).sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn repeated_rows_share_responsibilities() {
        let x = DMatrix::from_fn(12, 2, |i, j| if i % 2 == 0 { j as f64 } else { 3.0 + j as f64 });
        let s = init_state(&x, 4, 1.0, empirical_prior(&x).unwrap(), 4, 9, None).unwrap();
        let fit = fit_dp(&x, s, &FitConfig::default(), None).unwrap();
        for i in 2..12 {
            for c in 0..4 {
                assert_eq!(fit.log_phi[(i, c)], fit.log_phi[(i % 2, c)]);
            }
        }
    }

    #[test]
    fn fit_is_deterministic() {
        let (x, _) = gaussian_blobs(&[vec![0.0, 0.0], vec![6.0, 0.0]], 30, 4);
        let run = || {
            let s = init_state(&x, 6, 1.0, empirical_prior(&x).unwrap(), 4, 77, None).unwrap();
            fit_dp(&x, s, &FitConfig::default(), None).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn predictive_examples() {
        let s = fixed_state(&[0.0], 1);
        assert_eq!(posterior_predictive(&[3.0], &s).unwrap(), vec![1.0]);
        let mut s = fixed_state(&[-1.0, 1.0], 1);
        s.sticks = StickPosterior { gamma1: vec![1.0, 1.0], gamma2: vec![1.0, 1.0], eta: 1.0 };
        let p = posterior_predictive(&[0.0], &s).unwrap();
        assert_abs_diff_eq!(p[0], 0.5, epsilon = 1e-12);
        assert!(posterior_predictive(&[0.0, 1.0], &s).is_err());
    }

    #[test]
    fn trace_table_format() {
        let t = elbo_trace_table(&[-3.5, -2.0]);
        assert!(t.starts_with("iteration,elbo\n1,"));
        assert_eq!(t.lines().count(), 3);
    }
}
