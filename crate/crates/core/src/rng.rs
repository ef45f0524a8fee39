//! Seeded random streams.
//!
//! Every consumer of randomness gets its own ChaCha stream derived from a
//! 64-bit seed, so adding draws in one place never perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream identifiers. Values are part of the reproducibility contract.
pub mod stream {
    pub const CLASS_MEANS: u64 = 1;
    pub const SAMPLES: u64 = 2;
    pub const OOD_DIRECTION: u64 = 3;
    pub const SPLIT: u64 = 4;
    pub const INIT: u64 = 5;
    pub const SHUFFLE: u64 = 6;
    pub const MIXUP: u64 = 7;
}

pub fn seeded(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
