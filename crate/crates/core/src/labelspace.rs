//! Secret one-to-many label expansion and demasking.
//!
//! True class `i` owns `g[i]` pseudo classes. Slots are laid out class by
//! class (`0..g[0]` for class 0, then class 1, ...) and a seeded permutation
//! `perm` maps slot `s` to pseudo id `perm[s]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::TensorF64;

/// The secret map from true classes to pseudo classes and its inverse.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    q: usize,
    g: Vec<usize>,
    perm: Vec<usize>,
    seed: u64,
    forward: Vec<Vec<usize>>,
    inverse: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct LabelMapJson {
    q: usize,
    g: Vec<usize>,
    perm: Vec<usize>,
    seed: u64,
}

impl LabelMap {
    pub fn build(q: usize, g: &[usize], seed: u64) -> Result<Self> {
        if q < 2 {
            return Err(Error::InvalidArgument(format!("need q >= 2, got {q}")));
        }
        if g.len() != q {
            return Err(Error::InvalidArgument(format!(
                "expected {q} expansion factors, got {}",
                g.len()
            )));
        }
        if g.contains(&0) {
            return Err(Error::InvalidArgument("every g_i must be >= 1".into()));
        }
        let total: usize = g.iter().sum();
        let mut perm: Vec<usize> = (0..total).collect();
        let mut r = rng::seeded(rng::derive_seed(seed, "labelmap/perm"));
        rng::shuffle(&mut r, &mut perm);
        Self::from_parts(q, g.to_vec(), perm, seed)
    }

    fn from_parts(q: usize, g: Vec<usize>, perm: Vec<usize>, seed: u64) -> Result<Self> {
        let total: usize = g.iter().sum();
        if g.len() != q || perm.len() != total {
            return Err(Error::Format("label map tables disagree".into()));
        }
        let mut seen = vec![false; total];
        for &p in &perm {
            if p >= total || std::mem::replace(&mut seen[p], true) {
                return Err(Error::Format("perm is not a permutation".into()));
            }
        }
        let mut forward = Vec::with_capacity(q);
        let mut inverse = vec![0; total];
        let mut slot = 0;
        for (class, &gi) in g.iter().enumerate() {
            let ids: Vec<usize> = perm[slot..slot + gi].to_vec();
            for &id in &ids {
                inverse[id] = class;
            }
            forward.push(ids);
            slot += gi;
        }
        Ok(Self {
            q,
            g,
            perm,
            seed,
            forward,
            inverse,
        })
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn g(&self) -> &[usize] {
        &self.g
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn pseudo_count(&self) -> usize {
        self.inverse.len()
    }

    /// Pseudo ids owned by a true class.
    pub fn forward(&self, class: usize) -> &[usize] {
        &self.forward[class]
    }

    /// Average expansion factor `sum(g) / q`.
    pub fn gamma(&self) -> f64 {
        self.pseudo_count() as f64 / self.q as f64
    }

    pub fn demask(&self, pseudo: usize) -> Result<usize> {
        self.inverse
            .get(pseudo)
            .copied()
            .ok_or(Error::LabelOutOfRange {
                label: pseudo,
                classes: self.pseudo_count(),
            })
    }

    pub fn demask_all(&self, pseudo: &[usize]) -> Result<Vec<usize>> {
        pseudo.iter().map(|&p| self.demask(p)).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&LabelMapJson {
            q: self.q,
            g: self.g.clone(),
            perm: self.perm.clone(),
            seed: self.seed,
        })?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let j: LabelMapJson = serde_json::from_str(s)?;
        Self::from_parts(j.q, j.g, j.perm, j.seed)
    }
}

/// Where an expanded sample came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub original_index: usize,
    /// 0 for the original sample, k >= 1 for the k-th jittered copy.
    pub augmentation: usize,
}

#[derive(Debug, Clone)]
pub struct ExpandedDataset {
    pub features: TensorF64,
    pub pseudo_labels: Vec<usize>,
    pub provenance: Vec<Provenance>,
}

impl ExpandedDataset {
    pub fn len(&self) -> usize {
        self.pseudo_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pseudo_labels.is_empty()
    }

    pub fn augmented_count(&self) -> usize {
        self.provenance.iter().filter(|p| p.augmentation > 0).count()
    }
}

/// Expands `(features, labels)` into the pseudo-label space.
///
/// Class `i`'s samples are dealt round-robin over its `g[i]` pseudo classes.
/// Each pseudo class is then topped up with Gaussian-jittered copies of its
/// own members (cycled in order) until it holds as many samples as class `i`
/// originally had. The result is shuffled by a seeded permutation.
pub fn expand_dataset(
    features: &TensorF64,
    labels: &[usize],
    map: &LabelMap,
    noise_sigma: f64,
    seed: u64,
) -> Result<ExpandedDataset> {
    if !features.is_matrix() || features.rows() != labels.len() {
        return Err(Error::Shape(format!(
            "features {:?} vs {} labels",
            features.shape(),
            labels.len()
        )));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::InvalidArgument("noise_sigma must be finite and >= 0".into()));
    }
    let q = map.q();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); q];
    for (i, &y) in labels.iter().enumerate() {
        if y >= q {
            return Err(Error::LabelOutOfRange { label: y, classes: q });
        }
        by_class[y].push(i);
    }
    for (class, members) in by_class.iter().enumerate() {
        if members.is_empty() {
            return Err(Error::InvalidArgument(format!("class {class} has no samples")));
        }
        if members.len() < map.g()[class] {
            return Err(Error::InvalidArgument(format!(
                "class {class} has {} samples, fewer than its {} pseudo classes",
                members.len(),
                map.g()[class]
            )));
        }
    }

    let width = features.cols();
    let mut r = rng::seeded(rng::derive_seed(seed, "expand/jitter"));
    let mut out = Vec::new();
    let mut pseudo_labels = Vec::new();
    let mut provenance = Vec::new();
    for (class, members) in by_class.iter().enumerate() {
        let ids = map.forward(class);
        let gi = ids.len();
        for (j, &pseudo) in ids.iter().enumerate() {
            let part: Vec<usize> = members.iter().copied().skip(j).step_by(gi).collect();
            for &m in &part {
                out.extend_from_slice(features.row(m));
                pseudo_labels.push(pseudo);
                provenance.push(Provenance {
                    original_index: m,
                    augmentation: 0,
                });
            }
            let mut copies = vec![0usize; part.len()];
            for k in 0..members.len() - part.len() {
                let src = k % part.len();
                copies[src] += 1;
                let m = part[src];
                out.extend(
                    features
                        .row(m)
                        .iter()
                        .map(|&v| v + noise_sigma * rng::standard_normal(&mut r)),
                );
                pseudo_labels.push(pseudo);
                provenance.push(Provenance {
                    original_index: m,
                    augmentation: copies[src],
                });
            }
        }
    }
    // Release order must not reveal the class-by-class construction.
    let rows = pseudo_labels.len();
    let mut order: Vec<usize> = (0..rows).collect();
    let mut r = rng::seeded(rng::derive_seed(seed, "expand/order"));
    rng::shuffle(&mut r, &mut order);
    let grouped = TensorF64::new(vec![rows, width], out)?;
    Ok(ExpandedDataset {
        features: grouped.select_rows(&order),
        pseudo_labels: order.iter().map(|&i| pseudo_labels[i]).collect(),
        provenance: order.iter().map(|&i| provenance[i]).collect(),
    })
}
