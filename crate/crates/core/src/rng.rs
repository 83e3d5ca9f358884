//! Seeded generator streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent generator for `(seed, stream)`. Streams let per-sample and
/// per-purpose draws stay identical no matter how work is ordered.
pub fn derive_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream ids for the distinct consumers of one run seed.
pub mod streams {
    pub const INIT: u64 = 1 << 40;
    pub const TRAIN: u64 = 2 << 40;
    pub const IMBALANCE: u64 = 3 << 40;
    pub const PSEUDO: u64 = 4 << 40;
    pub const EVAL: u64 = 5 << 40;
}
