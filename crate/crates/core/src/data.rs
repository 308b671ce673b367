//! Synthetic desk-scale data: Gaussian blobs around smooth class images.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, derive_seed};
use crate::tensor::TensorF64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobConfig {
    pub classes: usize,
    /// Images are `side x side`; the feature dimension is `side * side`.
    pub side: usize,
    pub per_class: usize,
    /// Per-pixel noise around the class prototype.
    pub noise: f64,
    /// Gaussian bumps per prototype.
    pub bumps: usize,
    /// Minimum Euclidean distance between any two class prototypes.
    #[serde(default)]
    pub min_separation: f64,
    pub seed: u64,
}

impl Default for BlobConfig {
    fn default() -> Self {
        Self {
            classes: 4,
            side: 8,
            per_class: 200,
            noise: 0.08,
            bumps: 3,
            min_separation: 3.8,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub features: TensorF64,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }

    /// Stratified split; `test_fraction` of every class goes to the test set.
    pub fn split(&self, test_fraction: f64, seed: u64) -> Result<(Self, Self)> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(Error::InvalidArgument("test fraction must be in [0, 1)".into()));
        }
        let mut r = rng::seeded(seed);
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for c in 0..self.classes {
            let mut idx: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == c).collect();
            rng::shuffle(&mut r, &mut idx);
            let k = (idx.len() as f64 * test_fraction).round() as usize;
            test.extend_from_slice(&idx[..k]);
            train.extend_from_slice(&idx[k..]);
        }
        train.sort_unstable();
        test.sort_unstable();
        Ok((self.subset(&train), self.subset(&test)))
    }

    /// Copies of the features with Gaussian jitter added, as unlabeled
    /// probe inputs.
    pub fn jittered(&self, sigma: f64, seed: u64) -> TensorF64 {
        let mut r = rng::seeded(seed);
        let v = self
            .features
            .values()
            .iter()
            .map(|&x| x + sigma * rng::standard_normal(&mut r))
            .collect();
        TensorF64::from_parts(self.features.shape().to_vec(), v)
    }
}

fn prototype(side: usize, bumps: usize, r: &mut impl Rng) -> Vec<f64> {
    let centres: Vec<(f64, f64, f64, f64)> = (0..bumps)
        .map(|_| {
            (
                r.gen_range(0.0..side as f64),
                r.gen_range(0.0..side as f64),
                r.gen_range(0.8..2.5),
                r.gen_range(0.5..1.0),
            )
        })
        .collect();
    let mut img = vec![0.0; side * side];
    for y in 0..side {
        for x in 0..side {
            let v: f64 = centres
                .iter()
                .map(|&(cx, cy, w, a)| {
                    let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                    a * (-d2 / (2.0 * w * w)).exp()
                })
                .sum();
            img[y * side + x] = v.min(1.0);
        }
    }
    img
}

const MAX_PROTOTYPE_ATTEMPTS: usize = 10_000;

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Class-ordered blobs with pixel values clamped to `[0, 1]`.
pub fn blobs(cfg: &BlobConfig) -> Result<Dataset> {
    if cfg.classes < 2 || cfg.side == 0 || cfg.per_class == 0 || cfg.bumps == 0 {
        return Err(Error::InvalidArgument("blob config needs >= 2 classes and non-empty images".into()));
    }
    if !(cfg.noise >= 0.0 && cfg.noise.is_finite()) {
        return Err(Error::InvalidArgument("noise must be finite and >= 0".into()));
    }
    let mut pr = rng::seeded(derive_seed(cfg.seed, "blobs/prototypes"));
    let mut protos: Vec<Vec<f64>> = Vec::with_capacity(cfg.classes);
    let mut attempts = 0;
    while protos.len() < cfg.classes {
        if attempts == MAX_PROTOTYPE_ATTEMPTS {
            return Err(Error::InvalidArgument(format!(
                "could not place {} prototypes at separation {}",
                cfg.classes, cfg.min_separation
            )));
        }
        attempts += 1;
        let p = prototype(cfg.side, cfg.bumps, &mut pr);
        if protos.iter().all(|q| euclidean(q, &p) >= cfg.min_separation) {
            protos.push(p);
        }
    }
    let mut sr = rng::seeded(derive_seed(cfg.seed, "blobs/samples"));
    let dim = cfg.side * cfg.side;
    let mut values = Vec::with_capacity(cfg.classes * cfg.per_class * dim);
    let mut labels = Vec::with_capacity(cfg.classes * cfg.per_class);
    for (c, p) in protos.iter().enumerate() {
        for _ in 0..cfg.per_class {
            values.extend(
                p.iter()
                    .map(|&v| (v + cfg.noise * rng::standard_normal(&mut sr)).clamp(0.0, 1.0)),
            );
            labels.push(c);
        }
    }
    Ok(Dataset {
        features: TensorF64::matrix(labels.len(), dim, values)?,
        labels,
        classes: cfg.classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_and_range() {
        let d = blobs(&BlobConfig::default()).unwrap();
        assert_eq!(d.features.shape(), &[800, 64]);
        assert!(d.features.values().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(d.labels.iter().filter(|&&l| l == 3).count(), 200);
    }

    #[test]
    fn deterministic_and_split_is_stratified() {
        let cfg = BlobConfig::default();
        let d = blobs(&cfg).unwrap();
        assert_eq!(d, blobs(&cfg).unwrap());
        let (tr, te) = d.split(0.25, 1).unwrap();
        assert_eq!(tr.len() + te.len(), 800);
        assert_eq!(te.labels.iter().filter(|&&l| l == 0).count(), 50);
    }

    #[test]
    fn class_means_are_separated() {
        let d = blobs(&BlobConfig::default()).unwrap();
        let mean = |c: usize| -> Vec<f64> {
            let rows: Vec<&[f64]> = d.iter_rows_of(c);
            (0..64).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / rows.len() as f64).collect()
        };
        let (m0, m1) = (mean(0), mean(1));
        let dist: f64 = m0.iter().zip(&m1).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!(dist > 1.0, "{dist}");
    }

    impl Dataset {
        fn iter_rows_of(&self, c: usize) -> Vec<&[f64]> {
            (0..self.len()).filter(|&i| self.labels[i] == c).map(|i| self.features.row(i)).collect()
        }
    }
}
