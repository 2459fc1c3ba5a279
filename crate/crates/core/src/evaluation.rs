//! Classification and ranking metrics, stratified K-fold splits and the
//! OOD experiment driver.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::pipeline::{Bag, TrainedModel};
use crate::uncertainty::{bag_ood_scores, OodMeasure};
use crate::{Error, Result};

fn check_binary(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.is_empty() {
        return Err(Error::UndefinedMetric("empty input".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric("NaN score".into()));
    }
    let pos = labels.iter().filter(|l| **l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric("both classes must be present".into()));
    }
    Ok((pos, neg))
}

/// Area under the ROC curve as the Mann-Whitney statistic; ties count 1/2.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check_binary(scores, labels)?;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|a, b| scores[*a].total_cmp(&scores[*b]));
    // midranks over tie groups
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for k in &idx[i..=j] {
            if labels[*k] {
                rank_sum += mid;
            }
        }
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// Average precision: precision at each distinct threshold weighted by the
/// recall gained there.
pub fn aupr(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, _) = check_binary(scores, labels)?;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|a, b| scores[*b].total_cmp(&scores[*a]));
    let mut tp = 0usize;
    let mut seen = 0usize;
    let mut ap = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut gained = 0;
        let mut j = i;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            if labels[idx[j]] {
                gained += 1;
            }
            j += 1;
        }
        tp += gained;
        seen += j - i;
        if gained > 0 {
            ap += (gained as f64 / pos as f64) * (tp as f64 / seen as f64);
        }
        i = j;
    }
    Ok(ap)
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(Error::Shape(format!("{} predictions for {} labels", preds.len(), labels.len())));
    }
    if preds.is_empty() {
        return Err(Error::UndefinedMetric("empty input".into()));
    }
    let hits = preds.iter().zip(labels).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Unweighted mean of per-class F1 over classes that occur in either the
/// predictions or the labels.
pub fn macro_f1(preds: &[usize], labels: &[usize], k: usize) -> Result<f64> {
    accuracy(preds, labels)?;
    if let Some(bad) = preds.iter().chain(labels).find(|c| **c >= k) {
        return Err(Error::Domain(format!("class {bad} outside 0..{k}")));
    }
    let mut total = 0.0;
    let mut present = 0;
    for c in 0..k {
        let tp = preds.iter().zip(labels).filter(|(p, l)| **p == c && **l == c).count();
        let fp = preds.iter().zip(labels).filter(|(p, l)| **p == c && **l != c).count();
        let fn_ = preds.iter().zip(labels).filter(|(p, l)| **p != c && **l == c).count();
        if tp + fp + fn_ == 0 {
            continue;
        }
        present += 1;
        total += 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64;
    }
    Ok(total / present as f64)
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len();
    let mut table: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut ra: BTreeMap<usize, usize> = BTreeMap::new();
    let mut rb: BTreeMap<usize, usize> = BTreeMap::new();
    for (x, y) in a.iter().zip(b) {
        *table.entry((*x, *y)).or_default() += 1;
        *ra.entry(*x).or_default() += 1;
        *rb.entry(*y).or_default() += 1;
    }
    let c2 = |m: usize| (m * m.saturating_sub(1)) as f64 / 2.0;
    let index: f64 = table.values().map(|m| c2(*m)).sum();
    let sa: f64 = ra.values().map(|m| c2(*m)).sum();
    let sb: f64 = rb.values().map(|m| c2(*m)).sum();
    let expected = sa * sb / c2(n).max(1.0);
    let max = (sa + sb) / 2.0;
    if (max - expected).abs() < 1e-12 {
        return 1.0;
    }
    (index - expected) / (max - expected)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldSplit {
    pub folds: BTreeMap<String, usize>,
    pub n_folds: usize,
    pub seed: u64,
}

impl FoldSplit {
    /// Bag ids in fold `f` and outside it, in input order.
    pub fn partition<'a>(&self, ids: &'a [String], f: usize) -> (Vec<&'a String>, Vec<&'a String>) {
        ids.iter().partition(|id| self.folds.get(*id) != Some(&f))
    }
}

/// Seeded class-stratified K-fold split of `(bag_id, label)` pairs.
///
/// Members of each class are shuffled and dealt round-robin, continuing
/// from the fold where the previous class stopped, so fold sizes and
/// per-class counts both differ by at most one.
pub fn kfold_split(items: &[(String, usize)], n_folds: usize, seed: u64) -> Result<FoldSplit> {
    if n_folds < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {n_folds}")));
    }
    if n_folds > items.len() {
        return Err(Error::Config(format!("{n_folds} folds for {} bags", items.len())));
    }
    let mut by_class: BTreeMap<usize, Vec<&String>> = BTreeMap::new();
    for (id, y) in items {
        by_class.entry(*y).or_default().push(id);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = BTreeMap::new();
    let mut next = 0;
    for (_, mut ids) in by_class {
        ids.sort();
        ids.shuffle(&mut rng);
        for id in ids {
            if folds.insert(id.clone(), next).is_some() {
                return Err(Error::Dataset(format!("duplicate bag id {id}")));
            }
            next = (next + 1) % n_folds;
        }
    }
    Ok(FoldSplit { folds, n_folds, seed })
}

#[derive(Debug, Clone, PartialEq)]
pub struct OodRow {
    pub measure: OodMeasure,
    pub auroc: f64,
    pub aupr: f64,
}

/// AUROC and AUPR of every measure at separating `in_dist` (positive) from
/// `ood`, with scores oriented so that larger means in-distribution.
pub fn run_ood_experiment(
    in_dist: &[Bag],
    ood: &[Bag],
    model: &TrainedModel,
    measures: &[OodMeasure],
) -> Result<Vec<OodRow>> {
    let score_all = |bags: &[Bag]| -> Result<Vec<Vec<f64>>> {
        bags.par_iter()
            .map(|b| {
                let all = bag_ood_scores(b, model)?;
                Ok(measures
                    .iter()
                    .map(|m| all.iter().find(|s| s.measure == *m).expect("every measure scored").oriented())
                    .collect())
            })
            .collect()
    };
    let a = score_all(in_dist)?;
    let b = score_all(ood)?;
    let labels: Vec<bool> = a.iter().map(|_| true).chain(b.iter().map(|_| false)).collect();
    measures
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let s: Vec<f64> = a.iter().chain(&b).map(|r| r[i]).collect();
            Ok(OodRow { measure: *m, auroc: auroc(&s, &labels)?, aupr: aupr(&s, &labels)? })
        })
        .collect()
}

pub fn ood_table(rows: &[OodRow]) -> String {
    let mut s = String::from("measure,auroc,aupr\n");
    for r in rows {
        s.push_str(&format!("{},{:.6},{:.6}\n", r.measure.name(), r.auroc, r.aupr));
    }
    s
}
