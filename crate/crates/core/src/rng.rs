//! Counter-based random substreams.
//!
//! Every stochastic step derives its generator from `(seed, path)`, so results
//! do not depend on how work is split across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Stream labels used as the first path element.
pub mod label {
    pub const DRAW: u64 = 1;
    pub const BOOTSTRAP: u64 = 2;
    pub const REPLICATION: u64 = 3;
    pub const MONTE_CARLO: u64 = 4;
    pub const DATASET: u64 = 5;
    pub const CCC_EVAL: u64 = 6;
    pub const ORACLE: u64 = 7;
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix a seed and a path of counters into a single 64-bit key.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    let mut h = splitmix(seed);
    for &p in path {
        h = splitmix(h ^ splitmix(p.wrapping_add(0xD1B5_4A32_D192_ED03)));
    }
    h
}

/// Generator for the substream `(seed, path)`.
pub fn substream(seed: u64, path: &[u64]) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, path))
}
