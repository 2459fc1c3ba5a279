//! Two-level pipeline: per-bag DP aggregation of instances into centroids,
//! then a supervised slide-level DP over all centroids.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::dp_mixture::{argmax, empirical_prior, fit_dp, init_state, posterior_predictive, DPMixtureState, FitConfig};
use crate::special_math::log_sum_exp;
use crate::{Error, Result};

/// Class whose responsibilities weight the patch scores.
pub const TUMOR_CLASS: usize = 1;

/// Input dimension above which features are randomly projected by default.
pub const PROJECTION_THRESHOLD: usize = 64;
pub const DEFAULT_PROJECTION_DIM: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct Bag {
    pub bag_id: String,
    pub features: DMatrix<f64>,
    pub label: Option<usize>,
    pub coords: Option<Vec<(u32, u32)>>,
}

impl Bag {
    pub fn new(bag_id: impl Into<String>, features: DMatrix<f64>, label: Option<usize>) -> Result<Self> {
        let bag = Self { bag_id: bag_id.into(), features, label, coords: None };
        bag.validate()?;
        Ok(bag)
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.nrows() == 0 || self.features.ncols() == 0 {
            return Err(Error::Shape(format!("bag {} has no instances", self.bag_id)));
        }
        if self.features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("bag {} has non-finite features", self.bag_id)));
        }
        if let Some(c) = &self.coords {
            if c.len() != self.features.nrows() {
                return Err(Error::Shape(format!(
                    "bag {} has {} coordinates for {} instances",
                    self.bag_id,
                    c.len(),
                    self.features.nrows()
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }
}

/// Seeded Gaussian random projection `x -> M x` with `M` of shape `d x p`.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub matrix: DMatrix<f64>,
}

impl Projection {
    pub fn random(input_dim: usize, output_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5052_4f4a);
        let scale = 1.0 / (output_dim as f64).sqrt();
        let matrix = DMatrix::from_fn(output_dim, input_dim, |_, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * scale
        });
        Self { matrix }
    }

    pub fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        x * self.matrix.transpose()
    }
}

/// How per-centroid class probabilities are pooled into a bag prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pooling {
    /// Average of log probabilities, renormalized.
    LogMean,
    Mean,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchConfig {
    pub truncation: usize,
    pub eta: f64,
    pub hidden: Option<usize>,
    pub fit: FitConfig,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self { truncation: 10, eta: 1.0, hidden: None, fit: FitConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub patch: PatchConfig,
    /// Slide-level truncation; defaults to the number of classes.
    pub n_components: Option<usize>,
    pub eta2: f64,
    pub slide_hidden: Option<usize>,
    pub slide_fit: FitConfig,
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub cache_aggregation: bool,
    /// Target dimension of the random projection. `None` projects to the
    /// default dimension only when the input exceeds the threshold.
    pub project_dim: Option<usize>,
    pub pooling: Pooling,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            patch: PatchConfig::default(),
            n_components: None,
            eta2: 1.0,
            slide_hidden: None,
            slide_fit: FitConfig::default(),
            epochs: 10,
            patience: 3,
            seed: 7,
            cache_aggregation: false,
            project_dim: None,
            pooling: Pooling::LogMean,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CentroidSet {
    /// One row per occupied cluster, in component order.
    pub centroids: DMatrix<f64>,
    /// Component index of each centroid row.
    pub clusters: Vec<usize>,
    /// Cluster index of every instance, in the bag's original order.
    pub assignments: Vec<usize>,
    /// Patch-level fit over the canonically sorted instances.
    pub fit: DPMixtureState,
    pub converged: bool,
}

impl CentroidSet {
    pub fn len(&self) -> usize {
        self.centroids.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.centroids.nrows() == 0
    }
}

/// Order-independent 64-bit hash of a bag's rows.
pub fn content_hash(x: &DMatrix<f64>) -> u64 {
    let mut acc = 0u64;
    for r in x.row_iter() {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in r.iter() {
            for b in v.to_bits().to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        acc = acc.wrapping_add(h);
    }
    acc
}

fn canonical_order(x: &DMatrix<f64>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..x.nrows()).collect();
    idx.sort_by(|a, b| {
        for c in 0..x.ncols() {
            let o = x[(*a, c)].total_cmp(&x[(*b, c)]);
            if o.is_ne() {
                return o;
            }
        }
        std::cmp::Ordering::Equal
    });
    idx
}

/// Clusters one bag's instances and returns the occupied-cluster centroids.
pub fn aggregate_bag(features: &DMatrix<f64>, cfg: &PatchConfig, seed: u64) -> Result<CentroidSet> {
    let n = features.nrows();
    let p = features.ncols();
    if n == 0 {
        return Err(Error::Shape("bag has no instances".into()));
    }
    let order = canonical_order(features);
    let x = features.select_rows(&order);
    let hidden = cfg.hidden.unwrap_or(2 * p);
    let state = init_state(&x, cfg.truncation, cfg.eta, empirical_prior(&x)?, hidden, seed ^ content_hash(&x), None)?;
    let fit = fit_dp(&x, state, &cfg.fit, None)?;
    let sorted_assign = fit.assignments();
    let mut assignments = vec![0; n];
    for (k, orig) in order.iter().enumerate() {
        assignments[*orig] = sorted_assign[k];
    }
    let mut sums = vec![DVector::<f64>::zeros(p); cfg.truncation];
    let mut counts = vec![0usize; cfg.truncation];
    for (k, a) in sorted_assign.iter().enumerate() {
        sums[*a] += x.row(k).transpose();
        counts[*a] += 1;
    }
    let clusters: Vec<usize> = (0..cfg.truncation).filter(|t| counts[*t] > 0).collect();
    let centroids = DMatrix::from_fn(clusters.len(), p, |i, c| sums[clusters[i]][c] / counts[clusters[i]] as f64);
    let converged = fit.converged;
    Ok(CentroidSet { centroids, clusters, assignments, fit, converged })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub slide: DPMixtureState,
    /// Class of every slide-level component.
    pub class_map: Vec<usize>,
    pub n_classes: usize,
    /// Mean slide-level responsibility per component over training centroids.
    pub slide_weights: Vec<f64>,
    pub projection: Option<Projection>,
    pub config: TrainConfig,
    pub input_dim: usize,
}

/// Training diagnostics per epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub accuracy: f64,
    pub slide_converged: bool,
    pub unconverged_bags: usize,
    pub n_centroids: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: TrainedModel,
    pub epochs: Vec<EpochReport>,
}

impl TrainedModel {
    pub fn truncation(&self) -> usize {
        self.slide.truncation()
    }

    pub fn project(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.input_dim {
            return Err(Error::Shape(format!(
                "bag has feature dimension {}, model expects {}",
                x.ncols(),
                self.input_dim
            )));
        }
        Ok(match &self.projection {
            Some(pr) => pr.apply(x),
            None => x.clone(),
        })
    }

    pub fn aggregate(&self, bag: &Bag) -> Result<CentroidSet> {
        bag.validate()?;
        let x = self.project(&bag.features)?;
        aggregate_bag(&x, &self.config.patch, self.config.seed)
    }

    /// Class probabilities of one centroid (already projected).
    pub fn centroid_class_probs(&self, c: &[f64]) -> Result<Vec<f64>> {
        let comp = posterior_predictive(c, &self.slide)?;
        let mut out = vec![0.0; self.n_classes];
        for (k, p) in comp.iter().enumerate() {
            out[self.class_map[k]] += p;
        }
        Ok(out)
    }

    pub(crate) fn pool(&self, per_centroid: &[Vec<f64>]) -> Vec<f64> {
        let k = self.n_classes;
        let m = per_centroid.len() as f64;
        match self.config.pooling {
            Pooling::Mean => (0..k).map(|c| per_centroid.iter().map(|p| p[c]).sum::<f64>() / m).collect(),
            Pooling::LogMean => {
                let logs: Vec<f64> = (0..k)
                    .map(|c| per_centroid.iter().map(|p| p[c].max(f64::MIN_POSITIVE).ln()).sum::<f64>() / m)
                    .collect();
                let z = log_sum_exp(&logs);
                logs.iter().map(|l| (l - z).exp()).collect()
            }
        }
    }

    pub fn predict_centroids(&self, cs: &CentroidSet) -> Result<(usize, Vec<f64>)> {
        let per: Vec<Vec<f64>> = cs
            .centroids
            .row_iter()
            .map(|r| self.centroid_class_probs(&r.iter().copied().collect::<Vec<_>>()))
            .collect::<Result<_>>()?;
        let probs = self.pool(&per);
        Ok((argmax(probs.iter().copied()), probs))
    }
}

/// Predicted class (lowest index on ties) and class probabilities.
pub fn predict_bag(bag: &Bag, model: &TrainedModel) -> Result<(usize, Vec<f64>)> {
    let cs = model.aggregate(bag)?;
    model.predict_centroids(&cs)
}

fn check_dataset(bags: &[Bag]) -> Result<(usize, usize)> {
    let first = bags.first().ok_or_else(|| Error::Dataset("empty training set".into()))?;
    let p = first.dim();
    let mut max_label = 0;
    let mut seen = std::collections::BTreeSet::new();
    for b in bags {
        b.validate()?;
        if b.dim() != p {
            return Err(Error::Dataset(format!("bag {} has dimension {}, expected {p}", b.bag_id, b.dim())));
        }
        let y = b.label.ok_or_else(|| Error::Dataset(format!("bag {} is unlabeled", b.bag_id)))?;
        max_label = max_label.max(y);
        seen.insert(y);
    }
    if seen.len() < 2 {
        return Err(Error::Config("training needs at least two classes".into()));
    }
    Ok((p, max_label + 1))
}

fn aggregate_all(bags: &[Bag], x_of: impl Fn(&Bag) -> DMatrix<f64> + Sync, cfg: &PatchConfig, seed: u64) -> Result<Vec<CentroidSet>> {
    bags.par_iter().map(|b| aggregate_bag(&x_of(b), cfg, seed)).collect()
}

/// Trains on labeled bags; with `validation` bags early stopping tracks
/// their accuracy, otherwise training accuracy.
pub fn train(bags: &[Bag], validation: Option<&[Bag]>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let (p, n_classes) = check_dataset(bags)?;
    let k = cfg.n_components.unwrap_or(n_classes);
    if k < n_classes {
        return Err(Error::Config(format!("{k} slide components for {n_classes} classes")));
    }
    if cfg.epochs == 0 {
        return Err(Error::Config("epochs must be at least 1".into()));
    }
    if let Some(v) = validation {
        for b in v {
            b.validate()?;
            if b.label.is_none() {
                return Err(Error::Dataset(format!("validation bag {} is unlabeled", b.bag_id)));
            }
        }
    }
    let projection = match cfg.project_dim {
        Some(d) if d < p => Some(Projection::random(p, d, cfg.seed)),
        None if p > PROJECTION_THRESHOLD => Some(Projection::random(p, DEFAULT_PROJECTION_DIM, cfg.seed)),
        _ => None,
    };
    let proj = |b: &Bag| match &projection {
        Some(pr) => pr.apply(&b.features),
        None => b.features.clone(),
    };

    let mut counts = vec![0usize; n_classes];
    for b in bags {
        counts[b.label.expect("checked")] += 1;
    }
    let majority = argmax(counts.iter().map(|c| *c as f64));
    let class_map: Vec<usize> = (0..k).map(|c| if c < n_classes { c } else { majority }).collect();

    let mut sets: Vec<CentroidSet> = Vec::new();
    let mut slide: Option<DPMixtureState> = None;
    let mut best: Option<(f64, TrainedModel)> = None;
    let mut since_best = 0;
    let mut reports = Vec::new();
    for epoch in 0..cfg.epochs {
        if epoch == 0 || !cfg.cache_aggregation {
            sets = aggregate_all(bags, proj, &cfg.patch, cfg.seed)?;
        }
        let total: usize = sets.iter().map(|s| s.len()).sum();
        let d = sets[0].centroids.ncols();
        let mut c = DMatrix::zeros(total, d);
        let mut labels = Vec::with_capacity(total);
        let mut row = 0;
        for (s, b) in sets.iter().zip(bags) {
            for r in s.centroids.row_iter() {
                c.row_mut(row).copy_from(&r);
                labels.push(Some(b.label.expect("checked")));
                row += 1;
            }
        }
        let state = match slide.take() {
            Some(prev) if prev.log_phi.nrows() == total => prev,
            _ => init_state(
                &c,
                k,
                cfg.eta2,
                empirical_prior(&c)?,
                cfg.slide_hidden.unwrap_or(2 * d),
                cfg.seed,
                Some(&labels),
            )?,
        };
        let fitted = fit_dp(&c, state, &cfg.slide_fit, Some(&labels))?;
        let model = TrainedModel {
            slide_weights: fitted.mixing_weights(),
            slide: fitted.clone(),
            class_map: class_map.clone(),
            n_classes,
            projection: projection.clone(),
            config: cfg.clone(),
            input_dim: p,
        };
        slide = Some(fitted);

        let accuracy = match validation {
            Some(v) => {
                let preds: Vec<usize> = v.par_iter().map(|b| predict_bag(b, &model).map(|r| r.0)).collect::<Result<_>>()?;
                let ys: Vec<usize> = v.iter().map(|b| b.label.expect("checked")).collect();
                crate::evaluation::accuracy(&preds, &ys)?
            }
            None => {
                let preds: Vec<usize> = sets.iter().map(|s| model.predict_centroids(s).map(|r| r.0)).collect::<Result<_>>()?;
                let ys: Vec<usize> = bags.iter().map(|b| b.label.expect("checked")).collect();
                crate::evaluation::accuracy(&preds, &ys)?
            }
        };
        reports.push(EpochReport {
            epoch: epoch + 1,
            accuracy,
            slide_converged: model.slide.converged,
            unconverged_bags: sets.iter().filter(|s| !s.converged).count(),
            n_centroids: total,
        });
        match &best {
            Some((a, _)) if accuracy <= *a => since_best += 1,
            _ => {
                best = Some((accuracy, model));
                since_best = 0;
            }
        }
        if since_best >= cfg.patience {
            break;
        }
    }
    let model = best.expect("at least one epoch").1;
    Ok(TrainOutcome { model, epochs: reports })
}
