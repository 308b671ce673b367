//! Model assembly, the main-task accuracy gate and watermark chain checking.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dp::{canonical_digest, clip_rows, DpActivationBatch};
use crate::error::{Error, Result};
use crate::nn::{argmax_rows, Segment};
use crate::tensor::TensorF64;
use crate::watermark::{PublicLink, WatermarkLink};

pub const DEFAULT_ETA_GOAL: f64 = 0.95;
pub const MANIFEST_VERSION: u32 = 1;

/// The deployed model: client encoder, cut-layer clip, then every trainer
/// segment merged into one network.
#[derive(Debug, Clone)]
pub struct AssembledModel {
    pub client: Segment,
    pub clip_radius: f64,
    pub trainers: Segment,
}

impl AssembledModel {
    /// Pseudo-class logits for raw inputs.
    pub fn logits(&self, x: &TensorF64) -> Result<TensorF64> {
        let h = clip_rows(&self.client.infer(x)?, self.clip_radius);
        self.trainers.infer(&h)
    }

    pub fn predict(&self, x: &TensorF64) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.logits(x)?))
    }
}

pub fn assemble(client: &Segment, trainers: &[Segment], clip_radius: f64) -> Result<AssembledModel> {
    if trainers.is_empty() {
        return Err(Error::InvalidArgument("no trainer checkpoints".into()));
    }
    if !(clip_radius > 0.0 && clip_radius.is_finite()) {
        return Err(Error::InvalidArgument("clip radius must be finite and positive".into()));
    }
    if trainers[0].input_dim() != client.output_dim() {
        return Err(Error::Shape(format!(
            "client emits width {} but T1 expects {}",
            client.output_dim(),
            trainers[0].input_dim()
        )));
    }
    let parts: Vec<&Segment> = trainers.iter().collect();
    Ok(AssembledModel {
        client: client.clone(),
        clip_radius,
        trainers: Segment::concat(&parts)?,
    })
}

/// Test data as the data client hands it to the verifier: each sample comes
/// with the set of pseudo ids that count as a correct answer. The pseudo ids
/// reveal neither the true class names nor which group is which class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoTestSet {
    pub features: Vec<Vec<f64>>,
    pub groups: Vec<Vec<usize>>,
}

impl PseudoTestSet {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }
}

/// Fraction of test samples whose predicted pseudo id falls in their group.
/// This equals demasked accuracy without the verifier holding the map.
pub fn gate_accuracy(model: &AssembledModel, test: &PseudoTestSet) -> Result<f64> {
    if test.features.len() != test.groups.len() || test.features.is_empty() {
        return Err(Error::Shape("test set needs one group per sample".into()));
    }
    let x = TensorF64::from_rows(&test.features)?;
    let pred = model.predict(&x)?;
    let hits = pred.iter().zip(&test.groups).filter(|(p, g)| g.contains(p)).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// `(passed, accuracy)`.
pub fn accuracy_gate(model: &AssembledModel, test: &PseudoTestSet, threshold: f64) -> Result<(bool, f64)> {
    let acc = gate_accuracy(model, test)?;
    Ok((acc >= threshold, acc))
}

/// Published parameters needed to regenerate every link.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainManifest {
    pub version: u32,
    pub bits: usize,
    pub positions: usize,
    pub clip_radius: f64,
    pub links: Vec<PublicLink>,
}

impl ChainManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let m: Self = serde_json::from_slice(&std::fs::read(path)?)?;
        if m.version > MANIFEST_VERSION {
            return Err(Error::Format(format!("manifest version {} is newer than supported", m.version)));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Success,
    Fail,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailStage {
    None,
    /// The cached activations do not match their recorded digest.
    CacheDigest,
    Accuracy,
    Link(u32),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkResult {
    pub index: u32,
    pub eta: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub overall: Verdict,
    pub fail_stage: FailStage,
    /// `None` when no accuracy gate was requested.
    pub acc_main: Option<f64>,
    pub per_link: Vec<LinkResult>,
}

impl VerificationReport {
    fn fail(stage: FailStage, acc_main: Option<f64>, per_link: Vec<LinkResult>) -> Self {
        Self {
            overall: Verdict::Fail,
            fail_stage: stage,
            acc_main,
            per_link,
        }
    }

    /// The report for a cache whose digest does not match its contents.
    pub fn cache_mismatch() -> Self {
        Self::fail(FailStage::CacheDigest, None, Vec::new())
    }

    pub fn is_success(&self) -> bool {
        self.overall == Verdict::Success
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "overall     {:?}", self.overall);
        let _ = writeln!(s, "fail_stage  {:?}", self.fail_stage);
        match self.acc_main {
            Some(a) => {
                let _ = writeln!(s, "acc_main    {:.4}", a);
            }
            None => {
                let _ = writeln!(s, "acc_main    -");
            }
        }
        let _ = writeln!(s, "{:>5}  {:>8}  pass", "link", "eta");
        for l in &self.per_link {
            let _ = writeln!(s, "{:>5}  {:>8.4}  {}", l.index, l.eta, l.pass);
        }
        s
    }
}

/// Regenerates the chain from the cache and checks every link in order,
/// stopping at the first link below `eta_goal`.
pub fn verify_chain(
    trainers: &[Segment],
    cache: &DpActivationBatch,
    manifest: &ChainManifest,
    eta_goal: f64,
) -> Result<VerificationReport> {
    if cache.verify_digest().is_err() {
        return Ok(VerificationReport::cache_mismatch());
    }
    if manifest.links.len() != trainers.len() {
        return Err(Error::InvalidArgument(format!(
            "manifest lists {} links for {} checkpoints",
            manifest.links.len(),
            trainers.len()
        )));
    }
    let mut per_link = Vec::with_capacity(trainers.len());
    let mut h = cache.values.clone();
    for (i, (seg, pl)) in trainers.iter().zip(&manifest.links).enumerate() {
        let index = i as u32 + 1;
        if pl.index != index {
            return Err(Error::InvalidArgument(format!(
                "manifest entry {} claims link index {}",
                i + 1,
                pl.index
            )));
        }
        if i > 0 {
            h = trainers[i - 1].infer(&h)?;
        }
        let anchor = canonical_digest(&h)?;
        let eta = if seg.input_dim() != h.cols() || seg.param_count() < manifest.positions {
            0.0
        } else {
            let link = WatermarkLink::derive(
                &anchor,
                index,
                pl.nonce,
                pl.identity.as_bytes(),
                manifest.bits,
                manifest.positions,
                seg.param_count(),
            )?;
            link.detection_rate(seg)?
        };
        let pass = eta >= eta_goal;
        per_link.push(LinkResult { index, eta, pass });
        if !pass {
            return Ok(VerificationReport::fail(FailStage::Link(index), None, per_link));
        }
    }
    Ok(VerificationReport {
        overall: Verdict::Success,
        fail_stage: FailStage::None,
        acc_main: None,
        per_link,
    })
}

pub struct AccuracyRequirement<'a> {
    pub client: &'a Segment,
    pub test: &'a PseudoTestSet,
    pub threshold: f64,
}

/// Full audit: assemble, gate on accuracy, then check the chain.
pub fn verify(
    trainers: &[Segment],
    cache: &DpActivationBatch,
    manifest: &ChainManifest,
    eta_goal: f64,
    gate: Option<AccuracyRequirement<'_>>,
) -> Result<VerificationReport> {
    if cache.verify_digest().is_err() {
        return Ok(VerificationReport::cache_mismatch());
    }
    let mut acc_main = None;
    if let Some(g) = gate {
        let model = assemble(g.client, trainers, manifest.clip_radius)?;
        let (pass, acc) = accuracy_gate(&model, g.test, g.threshold)?;
        acc_main = Some(acc);
        if !pass {
            return Ok(VerificationReport::fail(FailStage::Accuracy, acc_main, Vec::new()));
        }
    }
    let mut report = verify_chain(trainers, cache, manifest, eta_goal)?;
    report.acc_main = acc_main;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;

    #[test]
    fn assemble_rejects_width_mismatch() {
        let c = Segment::init(&[4, 3], Activation::Relu, 1).unwrap();
        let t = Segment::init(&[5, 2], Activation::Identity, 2).unwrap();
        assert!(matches!(assemble(&c, &[t], 1.0), Err(Error::Shape(_))));
        assert!(assemble(&c, &[], 1.0).is_err());
    }

    #[test]
    fn single_trainer_assembly_is_two_segment_concat() {
        let c = Segment::init(&[4, 3], Activation::Relu, 1).unwrap();
        let t = Segment::init(&[3, 2], Activation::Identity, 2).unwrap();
        let m = assemble(&c, std::slice::from_ref(&t), 1e9).unwrap();
        let x = TensorF64::matrix(2, 4, vec![0.1, -0.2, 0.3, 0.4, 1.0, 0.0, -1.0, 0.5]).unwrap();
        let whole = Segment::concat(&[&c, &t]).unwrap();
        assert_eq!(m.logits(&x).unwrap(), whole.infer(&x).unwrap());
    }

    #[test]
    fn gate_thresholds() {
        let c = Segment::init(&[2, 2], Activation::Relu, 1).unwrap();
        let t = Segment::init(&[2, 2], Activation::Identity, 2).unwrap();
        let m = assemble(&c, &[t], 1.0).unwrap();
        let test = PseudoTestSet {
            features: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            groups: vec![vec![0, 1], vec![0, 1]],
        };
        assert_eq!(accuracy_gate(&m, &test, 1.0).unwrap(), (true, 1.0));
        assert!(!accuracy_gate(&m, &test, 1.01).unwrap().0);
    }

    #[test]
    fn report_serialises_link_stage() {
        let r = VerificationReport::fail(FailStage::Link(2), Some(0.9), vec![]);
        let j = serde_json::to_string(&r).unwrap();
        assert!(j.contains("\"link\":2"), "{j}");
        assert_eq!(serde_json::from_str::<VerificationReport>(&j).unwrap(), r);
    }
}
