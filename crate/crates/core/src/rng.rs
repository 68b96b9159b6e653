//! Seed derivation. Every stochastic stream in the toolkit is keyed by a
//! tuple of integers so results do not depend on iteration or worker order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix an ordered list of keys into one 64-bit seed.
pub fn derive_seed(keys: &[u64]) -> u64 {
    let mut h = 0x2545_F491_4F6C_DD1Du64;
    for &k in keys {
        h = splitmix64(h ^ splitmix64(k));
    }
    h
}

/// Per-sample augmentation seed: `hash(global_seed, epoch, sample_index, branch_tag)`.
pub fn sample_seed(global_seed: u64, epoch: u64, sample_index: u64, branch_tag: u64) -> u64 {
    derive_seed(&[global_seed, epoch, sample_index, branch_tag])
}

pub fn rng_from(keys: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(keys))
}

/// Stream tags so different consumers of one seed never share a stream.
pub mod stream {
    pub const ENCODER_INIT: u64 = 0x454e43;
    pub const HEAD_INIT: u64 = 0x48454144;
    pub const PROJECTOR_INIT: u64 = 0x50524f4a;
    pub const SHUFFLE: u64 = 0x5348_5546;
    pub const AUGMENT: u64 = 0x4155_47;
    pub const TTA: u64 = 0x545441;
    pub const SYNTH: u64 = 0x53594e;
    pub const LR_FIND: u64 = 0x4c52_46;
}
