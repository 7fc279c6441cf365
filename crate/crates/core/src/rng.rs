//! Named, seeded random substreams.
//!
//! All randomness in the crate flows from one run seed through labeled
//! substreams, so any component (noise draws, sampling, power iteration,
//! corpus generation) can be re-run in isolation with identical behavior.
//! Substream derivation is a fixed hash; it never changes between runs,
//! platforms, or worker counts.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Derive a child seed from `(seed, label)`.
pub fn derive(seed: u64, label: &str) -> u64 {
    splitmix64(seed ^ fnv1a(label.as_bytes()))
}

/// Derive a child seed from `(seed, label, index)`.
pub fn derive_indexed(seed: u64, label: &str, index: u64) -> u64 {
    splitmix64(derive(seed, label) ^ splitmix64(index.wrapping_add(1)))
}

/// Seeded generator for a named substream.
pub fn stream(seed: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, label))
}

/// Seeded generator for a named, indexed substream (one per example, per
/// tensor, per sample, ...).
pub fn stream_indexed(seed: u64, label: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_indexed(seed, label, index))
}
