//! Adversaries used to measure the defences: clustering label matching,
//! joint input/weight inversion, and black-box model extraction.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::dp::l1_norm;
use crate::error::{Error, Result};
use crate::nn::{argmax_rows, softmax_xent, Activation, ParamGrads, Segment};
use crate::pipeline::BatchSchedule;
use crate::rng::{self, derive_seed};
use crate::tensor::TensorF64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterOutcome {
    /// `None` marks a noise point (DBSCAN only).
    pub assignments: Vec<Option<usize>>,
    pub k_found: usize,
    pub perfect_accuracy: f64,
}

/// Fraction of true groups that some predicted cluster equals exactly.
pub fn perfect_cluster_accuracy(assignments: &[Option<usize>], true_groups: &[usize], q: usize) -> Result<f64> {
    if assignments.len() != true_groups.len() {
        return Err(Error::Shape("assignments and groups differ in length".into()));
    }
    if q == 0 {
        return Err(Error::InvalidArgument("q must be >= 1".into()));
    }
    let mut cluster_sizes: BTreeMap<usize, usize> = BTreeMap::new();
    for c in assignments.iter().flatten() {
        *cluster_sizes.entry(*c).or_default() += 1;
    }
    let mut hits = 0;
    for g in 0..q {
        let members: Vec<usize> = (0..true_groups.len()).filter(|&i| true_groups[i] == g).collect();
        let Some(&first) = members.first() else { continue };
        let Some(c) = assignments[first] else { continue };
        if members.iter().all(|&i| assignments[i] == Some(c)) && cluster_sizes[&c] == members.len() {
            hits += 1;
        }
    }
    Ok(hits as f64 / q as f64)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Row-major `n x n` Euclidean distances.
fn distance_matrix(x: &TensorF64) -> Vec<f64> {
    let n = x.rows();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let v = sq_dist(x.row(i), x.row(j)).sqrt();
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    d
}

/// Mean silhouette over all points; singletons score 0.
pub fn silhouette(dist: &[f64], n: usize, labels: &[usize], k: usize) -> f64 {
    let mut sizes = vec![0usize; k];
    for &l in labels {
        sizes[l] += 1;
    }
    let mut total = 0.0;
    let mut sums = vec![0.0; k];
    for i in 0..n {
        sums.iter_mut().for_each(|s| *s = 0.0);
        for j in 0..n {
            sums[labels[j]] += dist[i * n + j];
        }
        let own = labels[i];
        if sizes[own] <= 1 {
            continue;
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        if b.is_finite() {
            let m = a.max(b);
            if m > 0.0 {
                total += (b - a) / m;
            }
        }
    }
    total / n as f64
}

/// Lloyd's algorithm from a k-means++ seeding. Returns labels and inertia.
pub fn kmeans(x: &TensorF64, k: usize, seed: u64, max_iter: usize) -> Result<(Vec<usize>, f64)> {
    let (n, d) = (x.rows(), x.cols());
    if k == 0 || n < k {
        return Err(Error::InvalidArgument(format!("cannot form {k} clusters from {n} rows")));
    }
    let mut r = rng::seeded(seed);
    let mut centres: Vec<Vec<f64>> = vec![x.row(rng::below(&mut r, n as u64) as usize).to_vec()];
    let mut nearest: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i), &centres[0])).collect();
    while centres.len() < k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng::uniform01(&mut r) * total;
            let mut p = n - 1;
            for (i, &w) in nearest.iter().enumerate() {
                if u < w {
                    p = i;
                    break;
                }
                u -= w;
            }
            p
        } else {
            rng::below(&mut r, n as u64) as usize
        };
        centres.push(x.row(pick).to_vec());
        for (i, m) in nearest.iter_mut().enumerate() {
            *m = m.min(sq_dist(x.row(i), centres.last().unwrap()));
        }
    }
    let mut labels = vec![usize::MAX; n];
    for _ in 0..max_iter {
        let mut changed = false;
        for (i, l) in labels.iter_mut().enumerate() {
            let row = x.row(i);
            let best = (0..k)
                .min_by(|&a, &b| sq_dist(row, &centres[a]).total_cmp(&sq_dist(row, &centres[b])))
                .unwrap();
            if *l != best {
                *l = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(x.row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centres[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
    }
    let inertia = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| sq_dist(x.row(i), &centres[l]))
        .sum();
    Ok((labels, inertia))
}

/// Runs k-means for every `k` in `k_range` (best of three seedings) and
/// keeps the clustering with the highest mean silhouette.
pub fn kmeans_auto(
    x: &TensorF64,
    k_range: std::ops::RangeInclusive<usize>,
    true_groups: &[usize],
    q: usize,
    seed: u64,
) -> Result<ClusterOutcome> {
    let n = x.rows();
    let (lo, hi) = (*k_range.start(), *k_range.end());
    if lo == 0 || lo > hi {
        return Err(Error::InvalidArgument("k range must be non-empty and start at >= 1".into()));
    }
    if n < hi {
        return Err(Error::InvalidArgument(format!("fewer rows ({n}) than k = {hi}")));
    }
    let first = x.row(0);
    let degenerate = (1..n).all(|i| x.row(i) == first);
    let (labels, k_found) = if degenerate || hi == 1 {
        (vec![0; n], 1)
    } else {
        let dist = distance_matrix(x);
        let mut best: Option<(f64, Vec<usize>, usize)> = None;
        for k in lo.max(2)..=hi {
            let mut run: Option<(Vec<usize>, f64)> = None;
            for restart in 0..3u64 {
                let s = derive_seed(seed, &format!("kmeans/{k}/{restart}"));
                let (l, inertia) = kmeans(x, k, s, 300)?;
                if run.as_ref().is_none_or(|(_, b)| inertia < *b) {
                    run = Some((l, inertia));
                }
            }
            let (l, _) = run.unwrap();
            let score = silhouette(&dist, n, &l, k);
            if best.as_ref().is_none_or(|(b, _, _)| score > *b) {
                best = Some((score, l, k));
            }
        }
        let (_, l, k) = best.unwrap();
        (l, k)
    };
    let assignments: Vec<Option<usize>> = labels.into_iter().map(Some).collect();
    Ok(ClusterOutcome {
        perfect_accuracy: perfect_cluster_accuracy(&assignments, true_groups, q)?,
        assignments,
        k_found,
    })
}

/// Sorted distances from each point to its `k`-th nearest neighbour
/// (excluding itself).
pub fn k_distances(x: &TensorF64, k: usize) -> Vec<f64> {
    let n = x.rows();
    let mut out: Vec<f64> = (0..n)
        .map(|i| {
            let mut d: Vec<f64> = (0..n)
                .filter(|&j| j != i)
                .map(|j| sq_dist(x.row(i), x.row(j)).sqrt())
                .collect();
            if d.is_empty() {
                return 0.0;
            }
            let kk = k.min(d.len()) - 1;
            d.select_nth_unstable_by(kk, f64::total_cmp);
            d[kk]
        })
        .collect();
    out.sort_by(f64::total_cmp);
    out
}

/// The knee of a sorted curve: the point farthest from the chord joining its
/// ends.
pub fn elbow(sorted: &[f64]) -> f64 {
    match sorted.len() {
        0 => return 0.0,
        1 | 2 => return sorted[sorted.len() - 1],
        _ => {}
    }
    let n = sorted.len() - 1;
    let (y0, y1) = (sorted[0], sorted[n]);
    let (dx, dy) = (n as f64, y1 - y0);
    let norm = (dx * dx + dy * dy).sqrt();
    if norm == 0.0 {
        return y1;
    }
    let (mut best, mut at) = (-1.0, n);
    for (i, &y) in sorted.iter().enumerate() {
        let dist = (dy * i as f64 - dx * (y - y0)).abs() / norm;
        if dist > best {
            best = dist;
            at = i;
        }
    }
    sorted[at]
}

/// Density clustering with a fixed radius. A point is core if at least
/// `min_pts` points (itself included) lie within `eps`.
pub fn dbscan_with_eps(x: &TensorF64, min_pts: usize, eps: f64) -> Vec<Option<usize>> {
    let n = x.rows();
    let neighbours: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| sq_dist(x.row(i), x.row(j)).sqrt() <= eps)
                .collect()
        })
        .collect();
    let core: Vec<bool> = neighbours.iter().map(|nb| nb.len() >= min_pts).collect();
    let mut labels = vec![None; n];
    let mut next = 0;
    for i in 0..n {
        if !core[i] || labels[i].is_some() {
            continue;
        }
        labels[i] = Some(next);
        let mut queue = VecDeque::from([i]);
        while let Some(p) = queue.pop_front() {
            if !core[p] {
                continue;
            }
            for &j in &neighbours[p] {
                if labels[j].is_none() {
                    labels[j] = Some(next);
                    queue.push_back(j);
                }
            }
        }
        next += 1;
    }
    labels
}

/// DBSCAN with `eps` taken from the elbow of the `min_pts`-distance curve.
pub fn dbscan(x: &TensorF64, min_pts: usize, true_groups: &[usize], q: usize) -> Result<ClusterOutcome> {
    if min_pts < 2 {
        return Err(Error::InvalidArgument("min_pts must be >= 2".into()));
    }
    let eps = elbow(&k_distances(x, min_pts));
    let assignments = dbscan_with_eps(x, min_pts, eps);
    let k_found = assignments.iter().flatten().max().map_or(0, |m| m + 1);
    Ok(ClusterOutcome {
        perfect_accuracy: perfect_cluster_accuracy(&assignments, true_groups, q)?,
        assignments,
        k_found,
    })
}

/// Mean SSIM over all `win x win` sliding windows (stride 1) of two images.
pub fn ssim_windowed(a: &[f64], b: &[f64], width: usize, win: usize, range: f64) -> Result<f64> {
    if a.len() != b.len() || width == 0 || !a.len().is_multiple_of(width) {
        return Err(Error::Shape("ssim needs two images of equal shape".into()));
    }
    let height = a.len() / width;
    if win == 0 || win > width || win > height {
        return Err(Error::Shape(format!("window {win} does not fit a {height}x{width} image")));
    }
    let c1 = (0.01 * range).powi(2);
    let c2 = (0.03 * range).powi(2);
    let np = (win * win) as f64;
    let mut total = 0.0;
    let mut count = 0;
    for y0 in 0..=(height - win) {
        for x0 in 0..=(width - win) {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for y in y0..y0 + win {
                for x in x0..x0 + win {
                    let (u, v) = (a[y * width + x], b[y * width + x]);
                    sa += u;
                    sb += v;
                    saa += u * u;
                    sbb += v * v;
                    sab += u * v;
                }
            }
            let (ma, mb) = (sa / np, sb / np);
            let va = (saa / np - ma * ma).max(0.0);
            let vb = (sbb / np - mb * mb).max(0.0);
            let cov = sab / np - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// SSIM of two 2-D tensors with 8x8 windows.
pub fn ssim(a: &TensorF64, b: &TensorF64, range: f64) -> Result<f64> {
    if a.shape() != b.shape() || a.shape().len() != 2 {
        return Err(Error::Shape(format!("ssim shapes {:?} vs {:?}", a.shape(), b.shape())));
    }
    ssim_windowed(a.values(), b.values(), a.shape()[1], 8, range)
}

/// How the attacker's surrogate encoder starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SurrogateInit {
    /// He-uniform weights from a seed: the attacker knows only the shape.
    Random { seed: u64 },
    /// Worst case: the attacker starts from the true encoder weights.
    Known(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvertConfig {
    pub outer_iters: usize,
    pub input_steps: usize,
    pub weight_steps: usize,
    pub lr_input: f64,
    pub lr_weight: f64,
    /// Box the reconstructions are projected onto after each step.
    pub input_bounds: Option<(f64, f64)>,
    /// When set, observations are modelled as `clip_l1(encoder(x))`.
    pub clip_radius: Option<f64>,
}

impl Default for InvertConfig {
    fn default() -> Self {
        Self {
            outer_iters: 200,
            input_steps: 5,
            weight_steps: 1,
            lr_input: 0.5,
            lr_weight: 0.01,
            input_bounds: Some((0.0, 1.0)),
            clip_radius: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct InversionOutcome {
    pub reconstructions: TensorF64,
    pub surrogate: Segment,
    /// Attack loss after each outer iteration.
    pub loss_trace: Vec<f64>,
}

/// Per-row l1 clip and its vector-Jacobian product.
fn clip_forward(h: &TensorF64, s: f64) -> TensorF64 {
    crate::dp::clip_rows(h, s)
}

fn clip_backward(h: &TensorF64, g: &TensorF64, s: f64) -> TensorF64 {
    let mut out = g.clone();
    for i in 0..h.rows() {
        let row = h.row(i);
        let n = l1_norm(row);
        if n <= s {
            continue;
        }
        let gi = g.row(i);
        let dot: f64 = gi.iter().zip(row).map(|(gv, hv)| gv * hv).sum();
        for (j, o) in out.row_mut(i).iter_mut().enumerate() {
            *o = (s / n) * (gi[j] - dot * row[j].signum() / n);
        }
    }
    out
}

/// Attack loss `mean_rows ||model(x) - observed||^2` with gradients for the
/// inputs and the surrogate weights.
fn inversion_loss(
    surrogate: &Segment,
    x: &TensorF64,
    observed: &TensorF64,
    clip: Option<f64>,
) -> Result<(f64, TensorF64, ParamGrads)> {
    let (h, trace) = surrogate.forward(x)?;
    let out = match clip {
        Some(s) => clip_forward(&h, s),
        None => h.clone(),
    };
    let n = x.rows() as f64;
    let mut loss = 0.0;
    let mut g = out.clone();
    for (gv, ov) in g.values_mut().iter_mut().zip(observed.values()) {
        let diff = *gv - ov;
        loss += diff * diff;
        *gv = 2.0 * diff / n;
    }
    if let Some(s) = clip {
        g = clip_backward(&h, &g, s);
    }
    let (pg, dx) = surrogate.backward(&trace, &g)?;
    Ok((loss / n, dx, pg))
}

/// Reconstructs encoder inputs from observed activations by alternating
/// gradient steps on the inputs and on a surrogate encoder of the known
/// architecture.
pub fn unsplit_invert(
    observed: &TensorF64,
    encoder_dims: &[usize],
    activation: Activation,
    init: &SurrogateInit,
    cfg: &InvertConfig,
) -> Result<InversionOutcome> {
    if encoder_dims.len() < 2 || *encoder_dims.last().unwrap() != observed.cols() {
        return Err(Error::Shape("surrogate output width must match observations".into()));
    }
    let mut surrogate = Segment::init_with(
        encoder_dims,
        activation,
        activation,
        match init {
            SurrogateInit::Random { seed } => *seed,
            SurrogateInit::Known(_) => 0,
        },
    )?;
    if let SurrogateInit::Known(w) = init {
        surrogate.set_flat_params(w)?;
    }
    let start = match cfg.input_bounds {
        Some((lo, hi)) => (lo + hi) / 2.0,
        None => 0.0,
    };
    let mut x = TensorF64::zeros(vec![observed.rows(), encoder_dims[0]]);
    x.values_mut().iter_mut().for_each(|v| *v = start);
    let mut loss_trace = Vec::with_capacity(cfg.outer_iters);
    for it in 0..cfg.outer_iters {
        for _ in 0..cfg.input_steps {
            let (_, dx, _) = inversion_loss(&surrogate, &x, observed, cfg.clip_radius)?;
            for (v, g) in x.values_mut().iter_mut().zip(dx.values()) {
                *v -= cfg.lr_input * g;
                if let Some((lo, hi)) = cfg.input_bounds {
                    *v = v.clamp(lo, hi);
                }
            }
        }
        for _ in 0..cfg.weight_steps {
            let (_, _, pg) = inversion_loss(&surrogate, &x, observed, cfg.clip_radius)?;
            surrogate.sgd_step(&pg, cfg.lr_weight, 0.0)?;
        }
        let (loss, _, _) = inversion_loss(&surrogate, &x, observed, cfg.clip_radius)?;
        if !loss.is_finite() || x.values().iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged(format!(
                "inversion loss became {loss} at outer iteration {it}"
            )));
        }
        loss_trace.push(loss);
    }
    Ok(InversionOutcome {
        reconstructions: x,
        surrogate,
        loss_trace,
    })
}

/// Per-row SSIM and MSE of reconstructions against targets, each row viewed
/// as a `side x side` image.
pub fn score_reconstructions(
    recon: &TensorF64,
    targets: &TensorF64,
    side: usize,
    range: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if recon.shape() != targets.shape() || recon.cols() != side * side {
        return Err(Error::Shape("reconstructions must match targets and be square images".into()));
    }
    let mut ssims = Vec::with_capacity(recon.rows());
    let mut mses = Vec::with_capacity(recon.rows());
    for i in 0..recon.rows() {
        let (a, b) = (recon.row(i), targets.row(i));
        ssims.push(ssim_windowed(a, b, side, 8.min(side), range)?);
        mses.push(sq_dist(a, b) / a.len() as f64);
    }
    Ok((ssims, mses))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateTraining {
    pub dims: Vec<usize>,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
}

impl Default for SurrogateTraining {
    fn default() -> Self {
        Self {
            dims: vec![64, 32],
            epochs: 30,
            lr: 0.05,
            momentum: 0.9,
            batch_size: 32,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExtractionOutcome {
    pub surrogate: Segment,
    pub pseudo_label_queries: usize,
    pub surrogate_true_accuracy: f64,
    /// The attacker's guessed pseudo -> true assignment.
    pub mapping: Vec<usize>,
}

/// How the attacker turns pseudo answers into true-class training labels.
pub enum AttackerMapping<'a> {
    /// Each pseudo id gets a uniformly random true class.
    Random,
    /// Control condition: the attacker holds the real inverse map.
    Given(&'a [usize]),
}

/// Labels probe inputs through a pseudo-label oracle, maps the answers to
/// true classes and trains a surrogate on them.
#[allow(clippy::too_many_arguments)]
pub fn extraction_attack(
    api: impl Fn(&TensorF64) -> Result<Vec<usize>>,
    pseudo_classes: usize,
    probe: &TensorF64,
    q: usize,
    mapping: AttackerMapping<'_>,
    test_x: &TensorF64,
    test_y: &[usize],
    train: &SurrogateTraining,
    seed: u64,
) -> Result<ExtractionOutcome> {
    if q < 2 || pseudo_classes == 0 {
        return Err(Error::InvalidArgument("need q >= 2 and at least one pseudo class".into()));
    }
    let answers = api(probe)?;
    if answers.len() != probe.rows() || answers.iter().any(|&a| a >= pseudo_classes) {
        return Err(Error::Protocol("oracle returned malformed answers".into()));
    }
    let map: Vec<usize> = match mapping {
        AttackerMapping::Random => {
            let mut r = rng::seeded(derive_seed(seed, "extract/map"));
            (0..pseudo_classes).map(|_| rng::below(&mut r, q as u64) as usize).collect()
        }
        AttackerMapping::Given(m) => {
            if m.len() != pseudo_classes || m.iter().any(|&c| c >= q) {
                return Err(Error::InvalidArgument("given mapping does not fit".into()));
            }
            m.to_vec()
        }
    };
    let labels: Vec<usize> = answers.iter().map(|&a| map[a]).collect();
    let mut dims = train.dims.clone();
    if dims.first() != Some(&probe.cols()) {
        return Err(Error::Shape("surrogate input width must match probe data".into()));
    }
    dims.push(q);
    let mut surrogate = Segment::init(&dims, Activation::Identity, derive_seed(seed, "extract/init"))?;
    let schedule = BatchSchedule::new(probe.rows(), train.batch_size, derive_seed(seed, "extract/order"))?;
    for e in 0..train.epochs {
        for idx in schedule.epoch(e) {
            let x = probe.select_rows(&idx);
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let (logits, trace) = surrogate.forward(&x)?;
            let (_, g) = softmax_xent(&logits, &y)?;
            let (pg, _) = surrogate.backward(&trace, &g)?;
            surrogate.sgd_step(&pg, train.lr, train.momentum)?;
        }
    }
    let pred = argmax_rows(&surrogate.infer(test_x)?);
    let acc = pred.iter().zip(test_y).filter(|(p, y)| p == y).count() as f64 / test_y.len().max(1) as f64;
    Ok(ExtractionOutcome {
        surrogate,
        pseudo_label_queries: probe.rows(),
        surrogate_true_accuracy: acc,
        mapping: map,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_blobs() -> (TensorF64, Vec<usize>) {
        let mut r = rng::seeded(3);
        let mut v = Vec::new();
        let mut y = Vec::new();
        for c in 0..2 {
            for _ in 0..30 {
                v.push(c as f64 * 20.0 + 0.3 * rng::standard_normal(&mut r));
                v.push(0.3 * rng::standard_normal(&mut r));
                y.push(c);
            }
        }
        (TensorF64::matrix(60, 2, v).unwrap(), y)
    }

    #[test]
    fn perfect_accuracy_set_semantics() {
        let a = |v: &[usize]| v.iter().map(|&c| Some(c)).collect::<Vec<_>>();
        let groups = [0, 0, 1, 1, 2, 2, 3, 3];
        assert_eq!(perfect_cluster_accuracy(&a(&[5, 5, 1, 1, 2, 2, 0, 0]), &groups, 4).unwrap(), 1.0);
        assert_eq!(perfect_cluster_accuracy(&a(&[0, 0, 0, 0, 2, 2, 3, 3]), &groups, 4).unwrap(), 0.5);
        assert_eq!(perfect_cluster_accuracy(&a(&[0; 8]), &groups, 4).unwrap(), 0.0);
        let mut with_noise = a(&[0, 0, 1, 1, 2, 2, 3, 3]);
        with_noise[7] = None;
        assert_eq!(perfect_cluster_accuracy(&with_noise, &groups, 4).unwrap(), 0.75);
    }

    #[test]
    fn kmeans_finds_two_blobs() {
        let (x, y) = two_blobs();
        let out = kmeans_auto(&x, 2..=5, &y, 2, 1).unwrap();
        assert_eq!(out.k_found, 2);
        assert_eq!(out.perfect_accuracy, 1.0);
    }

    #[test]
    fn kmeans_identical_points_degenerate() {
        let x = TensorF64::matrix(5, 2, vec![1.0; 10]).unwrap();
        let out = kmeans_auto(&x, 2..=3, &[0, 0, 1, 1, 1], 2, 1).unwrap();
        assert_eq!(out.k_found, 1);
        assert_eq!(out.perfect_accuracy, 0.0);
        assert!(kmeans_auto(&x, 2..=9, &[0; 5], 2, 1).is_err());
    }

    #[test]
    fn dbscan_separates_dense_blobs() {
        let (x, y) = two_blobs();
        let out = dbscan(&x, 4, &y, 2).unwrap();
        assert_eq!(out.k_found, 2);
        for (a, &g) in out.assignments.iter().zip(&y) {
            if let Some(c) = a {
                assert_eq!(*c, out.assignments[g * 30..].iter().flatten().next().copied().unwrap());
            }
        }
        assert!(dbscan(&x, 1, &y, 2).is_err());
    }

    #[test]
    fn ssim_identity_and_inversion() {
        let img: Vec<f64> = (0..64).map(|i| ((i * 7) % 13) as f64 / 12.0).collect();
        let a = TensorF64::matrix(8, 8, img.clone()).unwrap();
        assert!((ssim(&a, &a, 1.0).unwrap() - 1.0).abs() < 1e-12);
        let b = TensorF64::matrix(8, 8, img.iter().map(|v| 1.0 - v).collect()).unwrap();
        assert!(ssim(&a, &b, 1.0).unwrap() < 1.0);
        assert!(ssim(&a, &TensorF64::matrix(4, 16, img).unwrap(), 1.0).is_err());
    }

    #[test]
    fn clip_vjp_matches_finite_difference() {
        let h = TensorF64::matrix(1, 3, vec![0.7, -0.9, 0.4]).unwrap();
        let g = TensorF64::matrix(1, 3, vec![0.3, 0.1, -0.5]).unwrap();
        let s = 1.0;
        let an = clip_backward(&h, &g, s);
        let f = |v: &[f64]| -> f64 {
            let c = clip_forward(&TensorF64::matrix(1, 3, v.to_vec()).unwrap(), s);
            c.values().iter().zip(g.values()).map(|(a, b)| a * b).sum()
        };
        for j in 0..3 {
            let mut p = h.values().to_vec();
            let mut m = p.clone();
            p[j] += 1e-6;
            m[j] -= 1e-6;
            let fd = (f(&p) - f(&m)) / 2e-6;
            assert!((fd - an.values()[j]).abs() < 1e-7, "{fd} vs {}", an.values()[j]);
        }
    }
}
