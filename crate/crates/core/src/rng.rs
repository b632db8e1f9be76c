//! Seeded generators and sub-seed derivation.
//!
//! Every stage draws from its own stream: `derive_seed(master, stream)`
//! runs one splitmix64 round over `master ^ golden * (stream + 1)`, so any
//! stage can be rerun in isolation with the same master seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, stream: u64) -> u64 {
    splitmix64(master ^ GOLDEN.wrapping_mul(stream.wrapping_add(1)))
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stream identifiers used by the pipeline.
pub mod stream {
    pub const TEACHERS: u64 = 1;
    pub const SYNTHETIC_INIT: u64 = 2;
    pub const SEGMENTS: u64 = 3;
    pub const CONDITIONAL: u64 = 4;
    pub const REAL_BATCHES: u64 = 5;
    pub const STUDENT_INIT: u64 = 6;
}
