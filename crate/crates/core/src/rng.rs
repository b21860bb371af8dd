//! Seed derivation. Every stochastic routine owns a ChaCha stream derived
//! from the run seed and a stream tag, so results never depend on call order
//! across modules.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// SplitMix64 finalizer over `seed ^ stream`.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream(seed: u64, tag: u64) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, tag))
}

pub(crate) mod tags {
    pub const MODEL_INIT: u64 = 1;
    pub const TRAIN_EPOCH: u64 = 2;
    pub const INDEX_INIT: u64 = 3;
    pub const INDEX_BATCHES: u64 = 4;
    pub const KMEANS: u64 = 5;
    pub const FINETUNE: u64 = 6;
    pub const EVAL_SAMPLE: u64 = 7;
}
