//! Seed handling.
//!
//! A run has one root seed. Each subsystem gets its own stream through
//! [`derive_seed`]: the first eight bytes (little endian) of
//! `SHA-256(root.to_le_bytes() || label)`. Labels are fixed strings such as
//! `"flow.init"` or `"tail.fit"`, so changing one subsystem's consumption of
//! randomness never shifts another's.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

pub fn derive_seed(root: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `n` rows of `dim` independent standard normal draws, row-major from one stream.
pub fn standard_normal_rows(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng(seed);
    standard_normal_rows_from(&mut r, n, dim)
}

pub fn standard_normal_rows_from<R: Rng + ?Sized>(r: &mut R, n: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..dim).map(|_| r.sample::<f64, _>(StandardNormal)).collect())
        .collect()
}
