//! Synthetic MIL datasets with known instance labels.
//!
//! Class-0 bags draw every instance from the normal distribution. A bag of
//! class `c > 0` replaces a random fraction of its instances with draws from
//! a unit Gaussian shifted by `separation` along axis `(c - 1) mod dim`.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::pipeline::Bag;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_bags: usize,
    pub instances_per_bag: (usize, usize),
    pub dim: usize,
    pub n_classes: usize,
    pub tumor_fraction: (f64, f64),
    pub separation: f64,
    /// Modes of the normal distribution, spaced 3 units apart on the last axis.
    pub normal_modes: usize,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_bags: 200,
            instances_per_bag: (50, 150),
            dim: 4,
            n_classes: 2,
            tumor_fraction: (0.05, 0.30),
            separation: 8.0,
            normal_modes: 1,
            test_fraction: 0.2,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.instances_per_bag;
        let (flo, fhi) = self.tumor_fraction;
        if self.n_bags == 0 || lo == 0 || lo > hi || self.dim == 0 || self.n_classes < 2 || self.normal_modes == 0 {
            return Err(Error::Config("synthetic counts must be positive with min <= max and >= 2 classes".into()));
        }
        if !(0.0..=1.0).contains(&flo) || !(0.0..=1.0).contains(&fhi) || flo > fhi {
            return Err(Error::Config(format!("tumor fraction range ({flo}, {fhi}) invalid")));
        }
        if !(self.separation > 0.0) {
            return Err(Error::Config("separation must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::Config("test fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub train: Vec<Bag>,
    pub test: Vec<Bag>,
    /// Per-instance "tumor" flags keyed by bag id.
    pub instance_labels: BTreeMap<String, Vec<bool>>,
}

impl SyntheticData {
    pub fn instance_labels_of(&self, bag: &Bag) -> &[bool] {
        &self.instance_labels[&bag.bag_id]
    }
}

/// Shifts every feature by `delta` standard deviations along all axes.
pub fn shift_bags(bags: &[Bag], delta: f64) -> Vec<Bag> {
    bags.iter()
        .map(|b| Bag {
            bag_id: format!("{}_shift", b.bag_id),
            features: b.features.map(|v| v + delta),
            label: b.label,
            coords: b.coords.clone(),
        })
        .collect()
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<SyntheticData> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let p = cfg.dim;
    let test_every = if cfg.test_fraction > 0.0 { (1.0 / cfg.test_fraction).round() as usize } else { 0 };
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut instance_labels = BTreeMap::new();
    for i in 0..cfg.n_bags {
        let label = i % cfg.n_classes;
        let n = rng.random_range(cfg.instances_per_bag.0..=cfg.instances_per_bag.1);
        let n_tumor = if label == 0 {
            0
        } else {
            let f = rng.random_range(cfg.tumor_fraction.0..=cfg.tumor_fraction.1);
            if f == 0.0 {
                0
            } else {
                ((f * n as f64).round() as usize).clamp(1, n)
            }
        };
        let mut flags: Vec<bool> = (0..n).map(|j| j < n_tumor).collect();
        flags.shuffle(&mut rng);
        let mut x = DMatrix::zeros(n, p);
        for (j, tumor) in flags.iter().enumerate() {
            let mode = if cfg.normal_modes > 1 { rng.random_range(0..cfg.normal_modes) } else { 0 };
            for d in 0..p {
                let z: f64 = StandardNormal.sample(&mut rng);
                let mut v = z;
                if *tumor {
                    if d == (label - 1) % p {
                        v += cfg.separation;
                    }
                } else if d == p - 1 {
                    v += 3.0 * mode as f64;
                }
                x[(j, d)] = v;
            }
        }
        let bag_id = format!("bag_{i:04}");
        let coords = (0..n).map(|j| ((j / 16) as u32, (j % 16) as u32)).collect();
        instance_labels.insert(bag_id.clone(), flags);
        let bag = Bag { bag_id, features: x, label: Some(label), coords: Some(coords) };
        if test_every > 0 && i % test_every == test_every - 1 {
            test.push(bag);
        } else {
            train.push(bag);
        }
    }
    Ok(SyntheticData { train, test, instance_labels })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_split_and_determinism() {
        let a = generate_synthetic(&SynthConfig::default()).unwrap();
        assert_eq!(a.train.len(), 160);
        assert_eq!(a.test.len(), 40);
        assert_eq!(a.test.iter().filter(|b| b.label == Some(1)).count(), 20);
        assert_eq!(a, generate_synthetic(&SynthConfig::default()).unwrap());
        for b in a.train.iter().chain(&a.test) {
            let flags = a.instance_labels_of(b);
            let k = flags.iter().filter(|f| **f).count();
            if b.label == Some(1) {
                assert!(k >= 1 && k as f64 <= 0.3 * b.len() as f64 + 1.0);
            } else {
                assert_eq!(k, 0);
            }
            assert!((50..=150).contains(&b.len()));
        }
    }

    #[test]
    fn tumor_instances_are_shifted() {
        let d = generate_synthetic(&SynthConfig::default()).unwrap();
        let b = d.train.iter().find(|b| b.label == Some(1)).unwrap();
        let flags = d.instance_labels_of(b);
        for (j, f) in flags.iter().enumerate() {
            let x0 = b.features[(j, 0)];
            if *f {
                assert!(x0 > 3.0);
            }
        }
    }

    #[test]
    fn centroid_space_is_linearly_separable() {
        // oracle: bag-level max of the first coordinate
        let d = generate_synthetic(&SynthConfig::default()).unwrap();
        let all: Vec<&Bag> = d.train.iter().chain(&d.test).collect();
        let correct = all
            .iter()
            .filter(|b| {
                let m = b.features.column(0).max();
                usize::from(m > 5.0) == b.label.unwrap()
            })
            .count();
        assert!(correct as f64 / all.len() as f64 >= 0.99);
    }

    #[test]
    fn rejects_bad_config() {
        assert!(generate_synthetic(&SynthConfig { n_classes: 1, ..SynthConfig::default() }).is_err());
        assert!(generate_synthetic(&SynthConfig { separation: 0.0, ..SynthConfig::default() }).is_err());
        assert!(generate_synthetic(&SynthConfig { instances_per_bag: (5, 2), ..SynthConfig::default() }).is_err());
    }
}
