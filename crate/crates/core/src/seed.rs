//! Deterministic seed derivation.
//!
//! Every stochastic routine takes an explicit seed; child streams (per series,
//! per replication, per restart) are derived by mixing the parent seed with a
//! stream label so results never depend on scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from `base` and a path of stream labels.
pub fn derive(base: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(base), |acc, &label| splitmix64(acc ^ splitmix64(label)))
}

/// Generator for the stream `path` under `base`.
pub fn rng(base: u64, path: &[u64]) -> Rng {
    Rng::seed_from_u64(derive(base, path))
}

/// Stable numeric label for a named stage.
pub fn label(name: &str) -> u64 {
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}
