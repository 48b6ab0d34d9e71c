//! Deterministic random streams keyed by (seed, label).
//!
//! Every random draw in the crate — stub-encoder weights, parameter init,
//! scene placement, shuffling, augmentation — comes from a ChaCha stream
//! whose seed is derived from a user seed and a textual key. Streams are
//! therefore independent of call order and stable across platforms and
//! releases (the key hash is a fixed FNV-1a, not the std hasher, which is
//! not guaranteed stable).

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x100_0000_01b3;

/// 64-bit FNV-1a over a byte string. Stable by construction.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// A deterministic random stream for one purpose.
///
/// `stream(seed, "init/decoder.conv1.weight")` always yields the same
/// sequence for the same pair, and unrelated labels yield unrelated streams.
pub fn stream(seed: u64, label: &str) -> ChaCha8Rng {
    let mut h = fnv1a(&seed.to_le_bytes());
    for &b in label.as_bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    ChaCha8Rng::seed_from_u64(h)
}

/// Standard-normal draws from a keyed stream.
pub fn normal_vec(seed: u64, label: &str, n: usize) -> Vec<f64> {
    let mut rng = stream(seed, label);
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Uniform draws in `[lo, hi)` from a keyed stream.
pub fn uniform_vec(seed: u64, label: &str, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    let mut rng = stream(seed, label);
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}
