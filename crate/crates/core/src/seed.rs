//! Seed derivation. Every random stream in the crate is a ChaCha8 generator
//! keyed by a root seed mixed with a short path of stream identifiers, so
//! results never depend on the order in which streams are created.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags keep unrelated draws from colliding when they share numeric ids.
pub mod stream {
    pub const CORPUS_PRETRAIN: u64 = 0x01;
    pub const CORPUS_PHENOTYPE: u64 = 0x02;
    pub const PARTITION: u64 = 0x10;
    pub const INIT: u64 = 0x20;
    pub const SHUFFLE: u64 = 0x30;
    pub const SPLIT: u64 = 0x40;
    pub const GRADCHECK: u64 = 0x50;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive(root: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(root), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng(root: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(root, path))
}
