//! Deterministic derivation of independent RNG streams from one base seed.
//!
//! FNV-1a is written out by hand (it is a dozen lines) so that derived seeds
//! and config hashes can never shift underneath us when a hashing dependency
//! upgrades its algorithm or default state.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a over a byte slice.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = FNV_OFFSET;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(FNV_PRIME);
    }
    hash
}

/// Derives a stream-specific seed from a base seed and a textual tag.
///
/// Different tags give statistically independent streams; the same
/// (base, tag) pair always gives the same seed.
pub fn derive_seed(base: u64, tag: &str) -> u64 {
    let mut hash = FNV_OFFSET;
    for &b in base.to_le_bytes().iter().chain(tag.as_bytes()) {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(FNV_PRIME);
    }
    hash
}

/// A ChaCha8 generator seeded from `derive_seed(base, tag)`.
pub fn rng_from(base: u64, tag: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tag))
}
