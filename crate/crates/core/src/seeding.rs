//! Deterministic seed derivation so every random stream is a pure function
//! of the user seed plus a few tags.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `base` with each tag in order.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(splitmix64(base), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn rng_for(base: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tags))
}

// Stream tags.
pub(crate) const TAG_WORLD: u64 = 0x5749;
pub(crate) const TAG_CLASS: u64 = 0x434c;
pub(crate) const TAG_TASK: u64 = 0x5441;
pub(crate) const TAG_INIT: u64 = 0x494e;
pub(crate) const TAG_ERM: u64 = 0x4552;
pub(crate) const TAG_ADAPT: u64 = 0x4144;
pub(crate) const TAG_PROJ: u64 = 0x5052;
