//! Seed derivation. Every random stream in a run is a ChaCha8 stream keyed by
//! the run seed and a fixed stream id, so adding a consumer never perturbs
//! the others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub mod stream {
    pub const CLUSTER_MEANS: u64 = 1;
    pub const TRAIN_SAMPLES: u64 = 2;
    pub const TEST_SAMPLES: u64 = 3;
    pub const NOISE: u64 = 4;
    pub const INIT: u64 = 5;
    /// Per-epoch shuffles use `SHUFFLE_BASE + epoch`.
    pub const SHUFFLE_BASE: u64 = 1 << 32;
}

pub fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
