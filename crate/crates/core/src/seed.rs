//! Counter-based seed derivation.
//!
//! Every random stream in a run is keyed by a tuple of integers mixed through
//! splitmix64, so no generator state needs to be carried between steps. Resuming
//! from a checkpoint only needs the step counter.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// One round of the splitmix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix an ordered list of words into one 64-bit seed.
pub fn mix(words: &[u64]) -> u64 {
    words.iter().fold(0x243F_6A88_85A3_08D3, |acc, &w| {
        splitmix64(acc ^ splitmix64(w))
    })
}

/// A ChaCha stream keyed by `words`.
pub fn rng_for(words: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(words))
}

/// Domain tags keep streams for different purposes disjoint.
pub mod domain {
    pub const SCENE: u64 = 0x5343_454E;
    pub const JITTER: u64 = 0x4A49_5454;
    pub const PROJECTION: u64 = 0x5052_4F4A;
    pub const ENCODER: u64 = 0x454E_434F;
    pub const INIT: u64 = 0x494E_4954;
    pub const GENERATOR: u64 = 0x4745_4E52;
    pub const ROLLOUT: u64 = 0x524F_4C4C;
    pub const SHUFFLE: u64 = 0x5348_5546;
}
