//! Seeded random streams and the counter-based seed derivation used for
//! parallel-safe reproducibility.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type ApnRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> ApnRng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from `master` and a path of counters, e.g.
/// `(domain, category, clip_index)`. Each component is folded in with a
/// SplitMix64 round, so distinct paths give unrelated streams.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix64(master), |h, &c| splitmix64(h ^ splitmix64(c.wrapping_add(0x632B_E59B_D9B4_E019))))
}
