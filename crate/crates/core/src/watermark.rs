//! Chained white-box watermarks.
//!
//! Each trainer's mark, key and embedding positions are regenerated from
//! public inputs: positions from the publisher nonce alone, mark and key from
//! the chain hash `H_i = SHA-256(anchor_digest || i || nonce || identity)`
//! where `anchor_digest` is the digest of the predecessor's output over the
//! cached DP batch.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dp::DpActivationBatch;
use crate::error::{Error, Result};
use crate::nn::{softmax_xent, ParamGrads, Segment};
use crate::pipeline::{anchor_activation, BatchSchedule};
use crate::rng::{self, HashStream};
use crate::tensor::TensorF64;

/// `M` distinct flat-parameter indices drawn from a stream keyed by the
/// nonce only.
pub fn wm_position(nonce: u64, m: usize, param_count: usize) -> Result<Vec<usize>> {
    if m > param_count {
        return Err(Error::InvalidArgument(format!(
            "cannot select {m} positions from {param_count} parameters"
        )));
    }
    let mut s = HashStream::from_parts(&[&nonce.to_le_bytes(), b"POS"]);
    Ok(rng::sample_indices(&mut s, param_count, m))
}

/// `SHA-256(prev_digest || index u32 LE || nonce u64 LE || identity)`.
pub fn chain_hash(prev_digest: &[u8; 32], index: u32, nonce: u64, identity: &[u8]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(prev_digest);
    h.update(index.to_le_bytes());
    h.update(nonce.to_le_bytes());
    h.update(identity);
    h.finalize().into()
}

/// First `b` bits of the stream keyed by `H || "WM"`, LSB-first within each
/// byte.
pub fn wm_gen(chain: &[u8; 32], b: usize) -> Vec<u8> {
    let mut s = HashStream::from_parts(&[chain, b"WM"]);
    let mut bytes = vec![0u8; b.div_ceil(8)];
    rand::RngCore::fill_bytes(&mut s, &mut bytes);
    (0..b).map(|j| (bytes[j / 8] >> (j % 8)) & 1).collect()
}

/// `b x m` standard normals, row-major, from the stream keyed by `H || "KEY"`,
/// stored at single precision.
pub fn key_gen(chain: &[u8; 32], b: usize, m: usize) -> Vec<f32> {
    let mut s = HashStream::from_parts(&[chain, b"KEY"]);
    (0..b * m).map(|_| rng::standard_normal(&mut s) as f32).collect()
}

/// Projections `p_j = sum_m key[j][m] * flat[Z[m]]`.
pub fn project(flat: &[f64], positions: &[usize], key: &[f32], bits: usize) -> Vec<f64> {
    let m = positions.len();
    let selected: Vec<f64> = positions.iter().map(|&z| flat[z]).collect();
    (0..bits).map(|j| dot(&key[j * m..(j + 1) * m], &selected)).collect()
}

/// Dot product with independent partial sums so the loop vectorises.
fn dot(a: &[f32], b: &[f64]) -> f64 {
    let mut acc = [0.0; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(&x, y)| f64::from(x) * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += f64::from(x[l]) * y[l];
        }
    }
    acc.iter().sum::<f64>() + tail
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

struct Scan {
    p: Vec<f64>,
    loss: f64,
    grad: Vec<f64>,
}

fn bits_of(p: &[f64]) -> Vec<u8> {
    p.iter().map(|&v| u8::from(v >= 0.0)).collect()
}

/// Everything needed to embed or check one link's mark.
#[derive(Debug, Clone)]
pub struct WatermarkLink {
    pub index: u32,
    pub nonce: u64,
    pub identity: Vec<u8>,
    pub chain_hash: [u8; 32],
    pub mark: Vec<u8>,
    pub key: Vec<f32>,
    pub positions: Vec<usize>,
    pub eta: f64,
}

impl WatermarkLink {
    pub fn derive(
        prev_digest: &[u8; 32],
        index: u32,
        nonce: u64,
        identity: &[u8],
        bits: usize,
        positions: usize,
        param_count: usize,
    ) -> Result<Self> {
        if index == 0 {
            return Err(Error::InvalidArgument("link indices start at 1".into()));
        }
        if bits == 0 || positions < bits {
            return Err(Error::InvalidArgument(format!(
                "need 0 < B <= M, got B={bits}, M={positions}"
            )));
        }
        let h = chain_hash(prev_digest, index, nonce, identity);
        Ok(Self {
            index,
            nonce,
            identity: identity.to_vec(),
            chain_hash: h,
            mark: wm_gen(&h, bits),
            key: key_gen(&h, bits, positions),
            positions: wm_position(nonce, positions, param_count)?,
            eta: 0.0,
        })
    }

    pub fn bits(&self) -> usize {
        self.mark.len()
    }

    /// Extracted bits: 1 when `p_j >= 0` (the sigmoid reaches 0.5), else 0.
    pub fn extract(&self, segment: &Segment) -> Result<Vec<u8>> {
        Ok(bits_of(&self.projections(segment)?))
    }

    fn projections(&self, segment: &Segment) -> Result<Vec<f64>> {
        let flat = segment.flatten_params();
        self.check_positions(flat.len())?;
        Ok(project(&flat, &self.positions, &self.key, self.bits()))
    }

    pub fn detection_rate(&self, segment: &Segment) -> Result<f64> {
        detection_rate(&self.extract(segment)?, &self.mark)
    }

    /// Binary cross-entropy between the mark and `sigmoid(p)`, summed over
    /// bits, with its gradient over the full flattened parameter vector.
    pub fn regularizer(&self, segment: &Segment) -> Result<(f64, Vec<f64>)> {
        let scan = self.scan(segment)?;
        Ok((scan.loss, scan.grad))
    }

    /// Projections, regularizer loss and gradient in one pass over the key.
    fn scan(&self, segment: &Segment) -> Result<Scan> {
        let flat = segment.flatten_params();
        self.check_positions(flat.len())?;
        let m = self.positions.len();
        let w: Vec<f64> = self.positions.iter().map(|&z| flat[z]).collect();
        let mut p = Vec::with_capacity(self.bits());
        let mut loss = 0.0;
        let mut selected = vec![0.0; m];
        for (row, &bit) in self.key.chunks_exact(m).zip(&self.mark) {
            let pj = dot(row, &w);
            p.push(pj);
            let t = f64::from(bit);
            loss += softplus(pj) - t * pj;
            let d = sigmoid(pj) - t;
            if d != 0.0 {
                for (g, &k) in selected.iter_mut().zip(row) {
                    *g += d * f64::from(k);
                }
            }
        }
        let mut grad = vec![0.0; flat.len()];
        for (&z, g) in self.positions.iter().zip(selected) {
            grad[z] += g;
        }
        Ok(Scan { p, loss, grad })
    }

    fn check_positions(&self, param_count: usize) -> Result<()> {
        if self.positions.iter().any(|&z| z >= param_count) {
            return Err(Error::Shape(format!(
                "watermark positions exceed segment parameter count {param_count}"
            )));
        }
        Ok(())
    }

    pub fn public(&self) -> PublicLink {
        PublicLink {
            index: self.index,
            nonce: self.nonce,
            identity: String::from_utf8_lossy(&self.identity).into_owned(),
            eta: self.eta,
        }
    }
}

/// The part of a link that is published; the rest is recomputed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PublicLink {
    pub index: u32,
    pub nonce: u64,
    pub identity: String,
    pub eta: f64,
}

/// `1 - hamming(extracted, mark) / B`.
pub fn detection_rate(extracted: &[u8], mark: &[u8]) -> Result<f64> {
    if extracted.len() != mark.len() || mark.is_empty() {
        return Err(Error::Shape(format!(
            "mark lengths differ: {} vs {}",
            extracted.len(),
            mark.len()
        )));
    }
    let mismatches = extracted.iter().zip(mark).filter(|(a, b)| a != b).count();
    Ok(1.0 - mismatches as f64 / mark.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmbedConfig {
    pub bits: usize,
    pub lambda: f64,
    pub eta_goal: f64,
    pub max_rounds: usize,
    pub embed_lr: f64,
    /// Selected weights per link; `None` means `4 * bits`.
    pub positions: Option<usize>,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        Self {
            bits: 512,
            lambda: 0.02,
            eta_goal: 1.0,
            max_rounds: 500,
            embed_lr: 0.005,
            positions: None,
        }
    }
}

impl EmbedConfig {
    pub fn position_count(&self) -> usize {
        self.positions.unwrap_or(4 * self.bits)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta_goal > 0.0 && self.eta_goal <= 1.0) {
            return Err(Error::InvalidArgument("eta_goal must be in (0, 1]".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidArgument("lambda must be finite and >= 0".into()));
        }
        if self.bits == 0 || self.position_count() < self.bits {
            return Err(Error::InvalidArgument("need 0 < B <= M".into()));
        }
        Ok(())
    }
}

/// Read-only view of the pipeline a trainer embeds against.
pub struct EmbedContext<'a> {
    /// Frozen segments `1..i-1`.
    pub upstream: &'a [Segment],
    /// Converged segments `i+1..n`; held fixed during embedding.
    pub downstream: &'a [Segment],
    pub cache: &'a DpActivationBatch,
    pub pseudo_labels: &'a [usize],
    pub batch_size: usize,
    pub momentum: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbedReport {
    pub link: PublicLink,
    pub rounds: usize,
    pub eta_trace: Vec<f64>,
    pub millis: f64,
}

/// Derives link `index` from the context's anchor and embeds it into
/// `segment`.
///
/// Each round takes one mini-batch step on the main-task loss (gradients
/// reach only `segment`) plus `lambda` times the mark regulariser, then
/// re-extracts the mark. Once the detection rate reaches the goal the segment
/// is frozen.
pub fn embed(
    segment: &mut Segment,
    index: u32,
    nonce: u64,
    identity: &[u8],
    ctx: &EmbedContext<'_>,
    cfg: &EmbedConfig,
) -> Result<(WatermarkLink, EmbedReport)> {
    cfg.validate()?;
    if let Some(k) = ctx.upstream.iter().position(|s| !s.is_frozen()) {
        return Err(Error::Sequencing(format!(
            "link {index} cannot embed before link {} is frozen",
            k + 1
        )));
    }
    if ctx.upstream.len() + 1 != index as usize {
        return Err(Error::Sequencing(format!(
            "link {index} needs exactly {} frozen predecessors, got {}",
            index - 1,
            ctx.upstream.len()
        )));
    }
    if segment.is_frozen() {
        return Err(Error::Frozen);
    }
    let start = Instant::now();
    let inputs = anchor_activation(ctx.upstream, ctx.cache)?;
    let anchor = crate::dp::canonical_digest(&inputs)?;
    let mut link = WatermarkLink::derive(
        &anchor,
        index,
        nonce,
        identity,
        cfg.bits,
        cfg.position_count(),
        segment.param_count(),
    )?;
    if inputs.rows() != ctx.pseudo_labels.len() {
        return Err(Error::Shape("labels do not match cached rows".into()));
    }

    let schedule = BatchSchedule::new(inputs.rows(), ctx.batch_size, ctx.seed)?;
    let mut eta_trace = Vec::new();
    let mut rounds = 0;
    let mut batches = schedule.iter_forever();
    let eta = loop {
        let scan = link.scan(segment)?;
        let eta = detection_rate(&bits_of(&scan.p), &link.mark)?;
        eta_trace.push(eta);
        if eta >= cfg.eta_goal {
            break eta;
        }
        if rounds == cfg.max_rounds {
            return Err(Error::EmbeddingFailed {
                link: index as usize,
                eta,
                goal: cfg.eta_goal,
                rounds,
            });
        }
        let idx = batches.next().expect("schedule never ends");
        let x = inputs.select_rows(&idx);
        let y: Vec<usize> = idx.iter().map(|&r| ctx.pseudo_labels[r]).collect();
        let mut grads = main_task_grads(segment, ctx.downstream, &x, &y)?;
        grads.add_flat(&scan.grad, cfg.lambda);
        segment.sgd_step(&grads, cfg.embed_lr, ctx.momentum)?;
        rounds += 1;
    };
    segment.freeze();
    link.eta = eta;
    log::debug!("link {index} embedded in {rounds} rounds, eta {eta:.4}");
    let report = EmbedReport {
        link: link.public(),
        rounds,
        eta_trace,
        millis: start.elapsed().as_secs_f64() * 1e3,
    };
    Ok((link, report))
}

/// Gradient of the mean cross-entropy w.r.t. `segment`'s parameters, with
/// `downstream` evaluated but not differentiated for update.
fn main_task_grads(
    segment: &Segment,
    downstream: &[Segment],
    x: &TensorF64,
    y: &[usize],
) -> Result<ParamGrads> {
    let (mut h, own_trace) = segment.forward(x)?;
    let mut traces = Vec::with_capacity(downstream.len());
    for s in downstream {
        let (next, tr) = s.forward(&h)?;
        traces.push(tr);
        h = next;
    }
    let (_, mut g) = softmax_xent(&h, y)?;
    for (s, tr) in downstream.iter().zip(&traces).rev() {
        g = s.backward(tr, &g)?.1;
    }
    Ok(segment.backward(&own_trace, &g)?.0)
}
