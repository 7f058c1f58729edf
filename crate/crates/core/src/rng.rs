//! Seed derivation and the generator used for every random draw.
//!
//! All randomness flows from explicit 64-bit seeds. A trial's seed is derived
//! from the master seed and its coordinates (experiment tag, sweep point,
//! trial index), so trials can run in any order on any number of workers and
//! still see the same streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Generator used for all sampling.
pub type SimRng = ChaCha8Rng;

/// Name recorded in serialized ensembles and run metadata.
pub const RNG_ALGORITHM: &str = "ChaCha8Rng::seed_from_u64";

const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Fold a sequence of coordinates into one seed. Order matters.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().enumerate().fold(GOLDEN_GAMMA, |acc, (i, &p)| {
        let salted = p.wrapping_add(GOLDEN_GAMMA.wrapping_mul(i as u64 + 1));
        mix64(acc ^ mix64(salted))
    })
}

pub fn rng_from_seed(seed: u64) -> SimRng {
    SimRng::seed_from_u64(seed)
}

/// Stable 64-bit tag for a short ASCII label (FNV-1a).
pub fn tag(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}
