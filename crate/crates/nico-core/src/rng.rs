//! Deterministic RNG derivation.
//!
//! Every random decision in the crate draws from a ChaCha8 stream seeded by
//! mixing a list of integer key parts (base seed, instance index, restart
//! index, role tag, ...).  Mixing uses splitmix64 finalization so that nearby
//! keys produce unrelated streams, and the same key list always reproduces
//! the same stream regardless of thread scheduling.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Role tags appended to key lists so that different consumers of the same
/// (seed, instance, restart) triple cannot collide.
pub mod tag {
    pub const GENERATE: u64 = 0x47454e; // instance coordinates
    pub const START_TOUR: u64 = 0x544f5552; // random initial tour
    pub const WARMUP: u64 = 0x5741524d; // warmup length + warmup sampling
    pub const SAMPLE: u64 = 0x53414d50; // policy action sampling
    pub const MEMBER: u64 = 0x4d454d42; // group-member rollouts
    pub const SIZE: u64 = 0x53495a45; // instance-size draws during training
    pub const INIT: u64 = 0x494e4954; // parameter initialization
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mix an ordered list of key parts into a single 64-bit seed.
///
/// Order matters: `[a, b]` and `[b, a]` yield different seeds, and so do
/// lists of different length, so callers can freely extend keys with
/// sub-indices without colliding with shorter keys.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h = splitmix64(0x6e69_636f ^ (parts.len() as u64).wrapping_mul(0xff51_afd7_ed55_8ccd));
    for &p in parts {
        h = splitmix64(h ^ splitmix64(p));
    }
    h
}

/// Deterministic ChaCha8 stream for the given key parts.
pub fn rng_from(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(parts))
}
