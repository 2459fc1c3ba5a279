//! Patch scores, slide log-likelihood and OOD measures.

use crate::distributions::{gaussian_entropy, GaussianParams};
use crate::dp_mixture::argmax;
use crate::pipeline::{Bag, TrainedModel, TUMOR_CLASS};
use crate::special_math::log_sum_exp;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PatchScoreReport {
    pub bag_id: String,
    pub scores: Vec<f64>,
    pub coords: Option<Vec<(u32, u32)>>,
    /// No cluster carried tumor weight; scores fell back to the raw mixture likelihood.
    pub degenerate: bool,
}

impl PatchScoreReport {
    /// Scores rescaled to `[0, 1]` within the bag; a constant bag maps to 0.
    pub fn normalized(&self) -> Vec<f64> {
        let lo = self.scores.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        self.scores
            .iter()
            .map(|s| if span > 0.0 { (s - lo) / span } else { 0.0 })
            .collect()
    }
}

/// Header plus one comma-separated line per instance.
pub fn patch_score_table(reports: &[PatchScoreReport]) -> String {
    let mut s = String::from("bag_id,instance_index,row,col,score,normalized\n");
    for r in reports {
        let norm = r.normalized();
        for (j, (v, nv)) in r.scores.iter().zip(&norm).enumerate() {
            let (row, col) = match &r.coords {
                Some(c) => (c[j].0.to_string(), c[j].1.to_string()),
                None => (String::new(), String::new()),
            };
            s.push_str(&format!("{},{j},{row},{col},{v:.6},{nv:.6}\n", r.bag_id));
        }
    }
    s
}

/// How instance scores are formed from the bag's patch-level mixture.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreMode {
    /// Log mixture density with cluster weights `phi_t * w_t`.
    Weighted,
    /// `Weighted` minus the unweighted log mixture density: the log of the
    /// instance's tumor probability under the patch-level posterior.
    Posterior,
    /// Log mixture density with cluster weights `phi_t`.
    Raw,
}

impl ScoreMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "weighted" => Some(Self::Weighted),
            "posterior" => Some(Self::Posterior),
            "raw" => Some(Self::Raw),
            _ => None,
        }
    }
}

/// Per-instance scores under the bag's patch-level fit.
///
/// Cluster weights `phi_t` are the bag's mean responsibilities; `w_t` is the
/// slide model's tumor-class probability for the centroid of cluster `t`,
/// zero for unoccupied clusters.
pub fn patch_scores(bag: &Bag, model: &TrainedModel, mode: ScoreMode) -> Result<PatchScoreReport> {
    let cs = model.aggregate(bag)?;
    let x = model.project(&bag.features)?;
    let t = cs.fit.truncation();
    let mean_phi = cs.fit.mixing_weights();
    let mut tumor_w = vec![0.0; t];
    if model.n_classes > TUMOR_CLASS {
        for (i, c) in cs.clusters.iter().enumerate() {
            let row: Vec<f64> = cs.centroids.row(i).iter().copied().collect();
            tumor_w[*c] = model.centroid_class_probs(&row)?[TUMOR_CLASS];
        }
    }
    let degenerate = mode != ScoreMode::Raw && tumor_w.iter().all(|w| *w == 0.0);
    let mode = if degenerate { ScoreMode::Raw } else { mode };
    let mut scores = Vec::with_capacity(x.nrows());
    for r in x.row_iter() {
        let xj: Vec<f64> = r.iter().copied().collect();
        let mut weighted = Vec::with_capacity(t);
        let mut raw = Vec::with_capacity(t);
        for (c, e) in cs.fit.encoders.iter().enumerate() {
            if mean_phi[c] <= 0.0 {
                continue;
            }
            let l = mean_phi[c].ln() + e.self_log_density(&xj)?;
            raw.push(l);
            if tumor_w[c] > 0.0 {
                weighted.push(l + tumor_w[c].ln());
            }
        }
        let s = match mode {
            ScoreMode::Raw => log_sum_exp(&raw),
            ScoreMode::Weighted => log_sum_exp(&weighted),
            ScoreMode::Posterior => log_sum_exp(&weighted) - log_sum_exp(&raw),
        };
        if !s.is_finite() {
            return Err(Error::Numeric(format!("non-finite patch score in bag {}", bag.bag_id)));
        }
        scores.push(s);
    }
    Ok(PatchScoreReport { bag_id: bag.bag_id.clone(), scores, coords: bag.coords.clone(), degenerate })
}

/// Mean over the bag's centroids of the slide mixture log-density.
pub fn slide_loglik(bag: &Bag, model: &TrainedModel) -> Result<f64> {
    let cs = model.aggregate(bag)?;
    centroid_loglik(&cs.centroids, model)
}

fn centroid_loglik(c: &nalgebra::DMatrix<f64>, model: &TrainedModel) -> Result<f64> {
    let mut total = 0.0;
    for r in c.row_iter() {
        let x: Vec<f64> = r.iter().copied().collect();
        let terms: Vec<f64> = model
            .slide
            .encoders
            .iter()
            .zip(&model.slide_weights)
            .filter(|(_, w)| **w > 0.0)
            .map(|(e, w)| Ok(w.ln() + e.self_log_density(&x)?))
            .collect::<Result<_>>()?;
        total += log_sum_exp(&terms);
    }
    Ok(total / c.nrows() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OodMeasure {
    LogResponsibility,
    MaxConfidence,
    Entropy,
    DifferentialEntropy,
}

impl OodMeasure {
    pub const ALL: [OodMeasure; 4] = [
        OodMeasure::LogResponsibility,
        OodMeasure::MaxConfidence,
        OodMeasure::Entropy,
        OodMeasure::DifferentialEntropy,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            OodMeasure::LogResponsibility => "log_responsibility",
            OodMeasure::MaxConfidence => "max_confidence",
            OodMeasure::Entropy => "entropy",
            OodMeasure::DifferentialEntropy => "differential_entropy",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }

    pub fn larger_is_in_dist(&self) -> bool {
        matches!(self, OodMeasure::LogResponsibility | OodMeasure::MaxConfidence)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OodScore {
    pub measure: OodMeasure,
    pub value: f64,
    pub larger_is_in_dist: bool,
}

impl OodScore {
    fn new(measure: OodMeasure, value: f64) -> Self {
        Self { measure, value, larger_is_in_dist: measure.larger_is_in_dist() }
    }

    /// Value with sign flipped when needed so that larger means in-distribution.
    pub fn oriented(&self) -> f64 {
        if self.larger_is_in_dist {
            self.value
        } else {
            -self.value
        }
    }
}

/// Max confidence, predictive entropy and the differential entropy of the
/// given component.
pub fn baseline_measures(probs: &[f64], component: &GaussianParams) -> Result<Vec<OodScore>> {
    if probs.is_empty() || probs.iter().any(|p| !(*p >= 0.0)) {
        return Err(Error::Domain("class probabilities must be nonnegative".into()));
    }
    let s: f64 = probs.iter().sum();
    if (s - 1.0).abs() > 1e-8 {
        return Err(Error::Domain(format!("class probabilities sum to {s}")));
    }
    let max = probs.iter().copied().fold(0.0, f64::max);
    let ent = -probs.iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum::<f64>();
    Ok(vec![
        OodScore::new(OodMeasure::MaxConfidence, max),
        OodScore::new(OodMeasure::Entropy, ent.max(0.0)),
        OodScore::new(OodMeasure::DifferentialEntropy, gaussian_entropy(&component.cov)),
    ])
}

/// All four measures for one bag.
///
/// The differential entropy uses the slide component with the largest mean
/// posterior over the bag's centroids, encoded at the centroid mean.
pub fn bag_ood_scores(bag: &Bag, model: &TrainedModel) -> Result<Vec<OodScore>> {
    let cs = model.aggregate(bag)?;
    let (_, probs) = model.predict_centroids(&cs)?;
    let k = model.truncation();
    let mut comp_post = vec![0.0; k];
    for r in cs.centroids.row_iter() {
        let x: Vec<f64> = r.iter().copied().collect();
        for (a, b) in comp_post.iter_mut().zip(crate::dp_mixture::posterior_predictive(&x, &model.slide)?) {
            *a += b;
        }
    }
    let best = argmax(comp_post.iter().copied());
    let centre: Vec<f64> = cs.centroids.row_mean().iter().copied().collect();
    let component = model.slide.encoders[best].encode(&centre)?;
    let mut out = vec![OodScore::new(OodMeasure::LogResponsibility, centroid_loglik(&cs.centroids, model)?)];
    out.extend(baseline_measures(&probs, &component)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::special_math::SpdMatrix;
    use approx::assert_abs_diff_eq;

    #[test]
    fn baseline_examples() {
        let g = GaussianParams::standard(1);
        let m = baseline_measures(&[1.0, 0.0], &g).unwrap();
        assert_eq!(m[0].value, 1.0);
        assert_eq!(m[1].value, 0.0);
        assert_abs_diff_eq!(m[2].value, 1.4189385332046727, epsilon = 1e-12);
        let m = baseline_measures(&[0.5, 0.5], &g).unwrap();
        assert_abs_diff_eq!(m[1].value, std::f64::consts::LN_2, epsilon = 1e-15);
        assert!(baseline_measures(&[0.5, 0.6], &g).is_err());
        let wide = GaussianParams::new(g.mean.clone(), SpdMatrix::from_diagonal(&[4.0]).unwrap()).unwrap();
        assert!(baseline_measures(&[1.0], &wide).unwrap()[2].value > m[2].value);
    }

    #[test]
    fn orientation() {
        assert!(OodMeasure::LogResponsibility.larger_is_in_dist());
        assert!(OodMeasure::MaxConfidence.larger_is_in_dist());
        assert!(!OodMeasure::Entropy.larger_is_in_dist());
        assert!(!OodMeasure::DifferentialEntropy.larger_is_in_dist());
        let s = OodScore::new(OodMeasure::Entropy, 0.3);
        assert_eq!(s.oriented(), -0.3);
        for m in OodMeasure::ALL {
            assert_eq!(OodMeasure::parse(m.name()), Some(m));
        }
    }

    #[test]
    fn normalized_scores() {
        let r = PatchScoreReport { bag_id: "b".into(), scores: vec![-3.0, -1.0, -2.0], coords: None, degenerate: false };
        assert_eq!(r.normalized(), vec![0.0, 1.0, 0.5]);
        let t = patch_score_table(&[r]);
        assert!(t.starts_with("bag_id,instance_index,row,col,score,normalized\nb,0,,,-3.000000,0.000000\n"));
    }
}
