//! Portable seeded randomness.
//!
//! Every random quantity in a run is a function of a 64-bit seed or a hash
//! key. Two generators are used:
//!
//! * [`seeded`] returns ChaCha20 keyed by `SHA-256(seed_le)`; it drives weight
//!   init, batch order, augmentation jitter and Laplace noise.
//! * [`HashStream`] is ChaCha8 keyed by `SHA-256(bytes)` for arbitrary key
//!   bytes; it drives watermark marks, keys and positions so that any party
//!   holding the key bytes can regenerate them.
//!
//! Uniform, Laplace and index transforms are written out here so their streams
//! are easy to reproduce elsewhere; normals use the `rand_distr` ziggurat.

use rand::{Rng, RngCore, SeedableRng};
use rand_distr::StandardNormal;
use rand_chacha::{ChaCha8Rng, ChaCha20Rng};
use sha2::{Digest, Sha256};

/// Derives an independent sub-seed for a named purpose.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

pub fn seeded(seed: u64) -> ChaCha20Rng {
    let key: [u8; 32] = Sha256::digest(seed.to_le_bytes()).into();
    ChaCha20Rng::from_seed(key)
}

/// Byte stream keyed by arbitrary bytes: ChaCha8 keyed by `SHA-256(key)`.
#[derive(Debug, Clone)]
pub struct HashStream(ChaCha8Rng);

impl HashStream {
    pub fn new(key: &[u8]) -> Self {
        Self(ChaCha8Rng::from_seed(Sha256::digest(key).into()))
    }

    /// Convenience for `key = parts[0] || parts[1] || ...`.
    pub fn from_parts(parts: &[&[u8]]) -> Self {
        Self::new(&parts.concat())
    }
}

impl RngCore for HashStream {
    fn next_u32(&mut self) -> u32 {
        self.0.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.0.fill_bytes(dest)
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> Result<(), rand::Error> {
        self.0.try_fill_bytes(dest)
    }
}

const TWO_POW_M53: f64 = 1.0 / (1u64 << 53) as f64;

/// Uniform in `[0, 1)` from the top 53 bits.
pub fn uniform01<R: RngCore + ?Sized>(rng: &mut R) -> f64 {
    (rng.next_u64() >> 11) as f64 * TWO_POW_M53
}

/// Uniform in the open interval `(0, 1)`.
pub fn uniform_open<R: RngCore + ?Sized>(rng: &mut R) -> f64 {
    ((rng.next_u64() >> 11) as f64 + 0.5) * TWO_POW_M53
}

pub fn uniform_range<R: RngCore + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * uniform01(rng)
}

pub fn standard_normal<R: RngCore + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// Laplace(0, b) by inverse CDF: `-b * sgn(u) * ln(1 - 2|u|)`, `u ~ U(-1/2, 1/2)`.
pub fn laplace<R: RngCore + ?Sized>(rng: &mut R, scale: f64) -> f64 {
    let u = uniform_open(rng) - 0.5;
    let mag = -(1.0 - 2.0 * u.abs()).ln();
    if scale == 0.0 {
        0.0
    } else if u < 0.0 {
        -scale * mag
    } else {
        scale * mag
    }
}

/// Uniform integer in `[0, n)` by rejection, unbiased.
pub fn below<R: RngCore + ?Sized>(rng: &mut R, n: u64) -> u64 {
    assert!(n > 0, "below(0)");
    let zone = u64::MAX - (u64::MAX % n) - 1;
    loop {
        let v = rng.next_u64();
        if v <= zone {
            return v % n;
        }
    }
}

/// Fisher-Yates, walking from the last element down.
pub fn shuffle<T, R: RngCore + ?Sized>(rng: &mut R, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = below(rng, (i + 1) as u64) as usize;
        items.swap(i, j);
    }
}

/// `m` distinct indices from `[0, n)` by a partial forward Fisher-Yates.
pub fn sample_indices<R: RngCore + ?Sized>(rng: &mut R, n: usize, m: usize) -> Vec<usize> {
    assert!(m <= n);
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..m {
        let j = i + below(rng, (n - i) as u64) as usize;
        pool.swap(i, j);
    }
    pool.truncate(m);
    pool
}
