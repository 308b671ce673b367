//! One-shot activation release: per-sample l1 clipping, Laplace noise,
//! caching and canonical digests.

use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::labelspace::ExpandedDataset;
use crate::nn::Segment;
use crate::rng;
use crate::tensor::{read_f64, read_u64, TensorF64};

pub const CACHE_MAGIC: &[u8; 4] = b"CLDP";

/// Slack allowed when re-checking that rows were clipped.
const CLIP_SLACK: f64 = 1e-12;

/// Privacy parameters. `epsilon = +inf` is the zero-noise limit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DpParams {
    epsilon: f64,
    clip_radius: f64,
    sensitivity: f64,
}

impl DpParams {
    pub fn new(epsilon: f64, clip_radius: f64) -> Result<Self> {
        if epsilon.is_nan() || epsilon <= 0.0 {
            return Err(Error::InvalidArgument(format!("epsilon must be > 0, got {epsilon}")));
        }
        if !(clip_radius > 0.0 && clip_radius.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "clip radius must be finite and > 0, got {clip_radius}"
            )));
        }
        Ok(Self {
            epsilon,
            clip_radius,
            sensitivity: 2.0 * clip_radius,
        })
    }

    /// Clipping only, no noise.
    pub fn noiseless(clip_radius: f64) -> Result<Self> {
        Self::new(f64::INFINITY, clip_radius)
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn clip_radius(&self) -> f64 {
        self.clip_radius
    }

    /// l1 sensitivity `2 S`.
    pub fn sensitivity(&self) -> f64 {
        self.sensitivity
    }

    /// Laplace scale `b = sensitivity / epsilon`.
    pub fn noise_scale(&self) -> f64 {
        if self.epsilon.is_infinite() {
            0.0
        } else {
            self.sensitivity / self.epsilon
        }
    }
}

/// The cached, clipped and perturbed client activations.
#[derive(Debug, Clone, PartialEq)]
pub struct DpActivationBatch {
    pub values: TensorF64,
    pub params: DpParams,
    pub seed: u64,
    pub digest: [u8; 32],
}

impl DpActivationBatch {
    pub fn rows(&self) -> usize {
        self.values.rows()
    }

    pub fn verify_digest(&self) -> Result<()> {
        if canonical_digest(&self.values)? != self.digest {
            return Err(Error::DigestMismatch("DP cache values do not match stored digest".into()));
        }
        Ok(())
    }

    /// `CLDP | eps f64 | S f64 | sensitivity f64 | seed u64 | tensor | digest[32]`.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CACHE_MAGIC)?;
        w.write_all(&self.params.epsilon.to_le_bytes())?;
        w.write_all(&self.params.clip_radius.to_le_bytes())?;
        w.write_all(&self.params.sensitivity.to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        self.values.write_to(w)?;
        w.write_all(&self.digest)?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CACHE_MAGIC {
            return Err(Error::Format("not a CLDP cache".into()));
        }
        let epsilon = read_f64(r)?;
        let clip_radius = read_f64(r)?;
        let sensitivity = read_f64(r)?;
        let seed = read_u64(r)?;
        let params = DpParams::new(epsilon, clip_radius)?;
        if params.sensitivity.to_bits() != sensitivity.to_bits() {
            return Err(Error::Format("stored sensitivity is not 2 S".into()));
        }
        let values = TensorF64::read_from(r)?;
        let mut digest = [0u8; 32];
        r.read_exact(&mut digest)?;
        let batch = Self {
            values,
            params,
            seed,
            digest,
        };
        batch.verify_digest()?;
        Ok(batch)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(&mut bytes.as_slice())
    }
}

pub fn l1_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).sum()
}

/// Projects a row onto the l1 ball of radius `s` by rescaling.
pub fn clip_l1(row: &[f64], s: f64) -> Vec<f64> {
    let n = l1_norm(row);
    if n <= s {
        row.to_vec()
    } else {
        let k = s / n;
        row.iter().map(|x| x * k).collect()
    }
}

pub fn clip_rows(batch: &TensorF64, s: f64) -> TensorF64 {
    let mut out = batch.clone();
    for i in 0..out.rows() {
        let clipped = clip_l1(out.row(i), s);
        out.row_mut(i).copy_from_slice(&clipped);
    }
    out
}

/// Adds i.i.d. `Laplace(0, sensitivity/epsilon)` to every coordinate.
pub fn laplace_perturb(clipped: &TensorF64, params: DpParams, seed: u64) -> Result<DpActivationBatch> {
    if !clipped.is_matrix() {
        return Err(Error::Shape("activation batch must be rank 2".into()));
    }
    let s = params.clip_radius();
    if let Some(i) = (0..clipped.rows()).find(|&i| l1_norm(clipped.row(i)) > s * (1.0 + CLIP_SLACK)) {
        return Err(Error::InvalidArgument(format!("row {i} exceeds the clip radius")));
    }
    let b = params.noise_scale();
    let mut r = rng::seeded(seed);
    let mut values = clipped.clone();
    for v in values.values_mut() {
        *v += rng::laplace(&mut r, b);
    }
    let digest = canonical_digest(&values)?;
    Ok(DpActivationBatch {
        values,
        params,
        seed,
        digest,
    })
}

/// Client-side release: one forward pass over the whole expanded set through
/// the frozen encoder, then clip and perturb.
pub fn protect(
    client: &Segment,
    data: &ExpandedDataset,
    params: DpParams,
    seed: u64,
) -> Result<DpActivationBatch> {
    if !client.is_frozen() {
        return Err(Error::NotFrozen("client encoder must be frozen before release".into()));
    }
    let activations = client.infer(&data.features)?;
    let clipped = clip_rows(&activations, params.clip_radius());
    laplace_perturb(&clipped, params, seed)
}

/// SHA-256 over the shape (u32 LE each) followed by the values (f64 LE).
pub fn canonical_digest(t: &TensorF64) -> Result<[u8; 32]> {
    if t.values().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("digest input"));
    }
    let mut h = Sha256::new();
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::Format("dim exceeds u32".into()))?;
        h.update(d.to_le_bytes());
    }
    for v in t.values() {
        h.update(v.to_le_bytes());
    }
    Ok(h.finalize().into())
}

/// `ln p(y|x) - ln p(y|x')` under per-coordinate Laplace noise of scale `b`.
pub fn laplace_log_density_ratio(y: &[f64], x: &[f64], x_prime: &[f64], b: f64) -> f64 {
    let d = |a: &[f64]| -> f64 { y.iter().zip(a).map(|(u, v)| (u - v).abs()).sum() };
    (d(x_prime) - d(x)) / b
}

fn log_sum_exp(terms: &[f64]) -> f64 {
    let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
}

/// A hypothesised hidden class: candidate clipped inputs with prior weights.
#[derive(Debug, Clone)]
pub struct ClassHypothesis {
    pub inputs: Vec<Vec<f64>>,
    pub priors: Vec<f64>,
}

/// Log-likelihood ratio that the pair `(y_a, y_b)` was generated by class `t`
/// versus class `u`, both inputs of the pair sharing the hidden input:
///
/// `ln sum_x p(y_a|x) p(y_b|x) pi_t(x) - ln sum_x' p(y_a|x') p(y_b|x') pi_u(x')`.
///
/// With clipped inputs this is bounded by `2 epsilon`.
pub fn pair_linkage_log_ratio(
    y_a: &[f64],
    y_b: &[f64],
    t: &ClassHypothesis,
    u: &ClassHypothesis,
    b: f64,
) -> f64 {
    let ll = |h: &ClassHypothesis| -> f64 {
        let terms: Vec<f64> = h
            .inputs
            .iter()
            .zip(&h.priors)
            .map(|(x, &p)| {
                let da: f64 = y_a.iter().zip(x).map(|(y, v)| (y - v).abs()).sum();
                let db: f64 = y_b.iter().zip(x).map(|(y, v)| (y - v).abs()).sum();
                p.ln() - (da + db) / b
            })
            .collect();
        log_sum_exp(&terms)
    };
    ll(t) - ll(u)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labelspace::{expand_dataset, LabelMap};
    use crate::nn::{Activation, Segment};

    #[test]
    fn clip_inside_ball_unchanged() {
        assert_eq!(clip_l1(&[0.2, -0.3], 1.0), vec![0.2, -0.3]);
    }

    #[test]
    fn clip_on_boundary_scales_exactly() {
        let c = clip_l1(&[1.0, -1.0], 1.0);
        assert_eq!(c, vec![0.5, -0.5]);
        assert_eq!(l1_norm(&c), 1.0);
    }

    #[test]
    fn random_rows_respect_radius() {
        let mut r = rng::seeded(5);
        for _ in 0..1000 {
            let row: Vec<f64> = (0..16).map(|_| rng::uniform_range(&mut r, -10.0, 10.0)).collect();
            let s = rng::uniform_range(&mut r, 0.01, 5.0);
            assert!(l1_norm(&clip_l1(&row, s)) <= s + 1e-12);
        }
    }

    #[test]
    fn scale_is_two_s_over_epsilon() {
        let p = DpParams::new(2.0, 1.0).unwrap();
        assert_eq!(p.sensitivity(), 2.0);
        assert_eq!(p.noise_scale(), 1.0);
        for eps in [2.0, 5.0, 10.0] {
            assert!(DpParams::new(eps, 1.0).is_ok());
        }
    }

    #[test]
    fn nonpositive_epsilon_rejected() {
        assert!(DpParams::new(0.0, 1.0).is_err());
        assert!(DpParams::new(-1.0, 1.0).is_err());
        assert!(DpParams::new(f64::NAN, 1.0).is_err());
    }

    #[test]
    fn perturb_rejects_unclipped_rows() {
        let t = TensorF64::matrix(1, 2, vec![1.0, 1.0]).unwrap();
        assert!(laplace_perturb(&t, DpParams::new(1.0, 1.0).unwrap(), 0).is_err());
    }

    #[test]
    fn perturb_is_seed_deterministic() {
        let t = TensorF64::matrix(2, 2, vec![0.1, 0.2, -0.3, 0.1]).unwrap();
        let p = DpParams::new(5.0, 1.0).unwrap();
        let a = laplace_perturb(&t, p, 9).unwrap();
        let b = laplace_perturb(&t, p, 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.values, laplace_perturb(&t, p, 10).unwrap().values);
    }

    #[test]
    fn digest_is_stable_and_sensitive() {
        let t = TensorF64::matrix(2, 2, vec![0.5, -1.0, 2.0, 3.0]).unwrap();
        assert_eq!(canonical_digest(&t).unwrap(), canonical_digest(&t).unwrap());
        let mut flipped = t.clone();
        flipped.values_mut()[1] = 1.0;
        assert_ne!(canonical_digest(&t).unwrap(), canonical_digest(&flipped).unwrap());
    }

    #[test]
    fn empty_tensor_digest_is_hash_of_header() {
        let t = TensorF64::new(vec![0], vec![]).unwrap();
        let expected: [u8; 32] = Sha256::digest(0u32.to_le_bytes()).into();
        assert_eq!(canonical_digest(&t).unwrap(), expected);
    }

    fn fixture() -> (Segment, ExpandedDataset) {
        let mut client = Segment::init(&[4, 3], Activation::Relu, 1).unwrap();
        client.freeze();
        let x = TensorF64::matrix(
            6,
            4,
            (0..24).map(|k| (k as f64 * 0.37).sin()).collect(),
        )
        .unwrap();
        let y = vec![0, 1, 0, 1, 0, 1];
        let map = LabelMap::build(2, &[1, 1], 3).unwrap();
        let data = expand_dataset(&x, &y, &map, 0.0, 4).unwrap();
        (client, data)
    }

    #[test]
    fn protect_requires_frozen_client() {
        let (client, data) = fixture();
        let thawed = Segment::new(client.layers().to_vec()).unwrap();
        assert!(matches!(
            protect(&thawed, &data, DpParams::new(1.0, 1.0).unwrap(), 0),
            Err(Error::NotFrozen(_))
        ));
    }

    #[test]
    fn protect_is_deterministic_one_row_per_sample() {
        let (client, data) = fixture();
        let p = DpParams::new(5.0, 0.5).unwrap();
        let a = protect(&client, &data, p, 7).unwrap();
        let b = protect(&client, &data, p, 7).unwrap();
        assert_eq!(a.digest, b.digest);
        assert_eq!(a.values, b.values);
        assert_eq!(a.rows(), data.len());
    }

    #[test]
    fn zero_noise_limit_returns_clipped_activations() {
        let (client, data) = fixture();
        let p = DpParams::noiseless(0.5).unwrap();
        let out = protect(&client, &data, p, 7).unwrap();
        let expected = clip_rows(&client.infer(&data.features).unwrap(), 0.5);
        assert_eq!(out.values, expected);
    }

    #[test]
    fn cache_file_roundtrip_and_tamper_detection() {
        let (client, data) = fixture();
        let out = protect(&client, &data, DpParams::new(2.0, 0.5).unwrap(), 1).unwrap();
        let mut buf = Vec::new();
        out.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"CLDP");
        let back = DpActivationBatch::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, out);
        // Flip a bit inside the first tensor value.
        let value_offset = 4 + 8 * 4 + 2 + 4 * 2;
        buf[value_offset] ^= 1;
        assert!(matches!(
            DpActivationBatch::read_from(&mut buf.as_slice()),
            Err(Error::DigestMismatch(_))
        ));
    }

    #[test]
    fn log_density_ratio_is_bounded_by_epsilon() {
        let p = DpParams::new(3.0, 1.0).unwrap();
        let b = p.noise_scale();
        let mut r = rng::seeded(12);
        for _ in 0..1000 {
            let mut draw = |n: usize| -> Vec<f64> {
                (0..n).map(|_| rng::uniform_range(&mut r, -2.0, 2.0)).collect()
            };
            let x = clip_l1(&draw(5), 1.0);
            let xp = clip_l1(&draw(5), 1.0);
            let y = draw(5);
            let lr = laplace_log_density_ratio(&y, &x, &xp, b);
            let dist: f64 = x.iter().zip(&xp).map(|(a, c)| (a - c).abs()).sum();
            assert!(lr <= p.epsilon() * dist / p.sensitivity() + 1e-9);
            assert!(lr <= p.epsilon() + 1e-9);
        }
    }
}
