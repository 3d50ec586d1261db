//! Deterministic RNG stream derivation.
//!
//! Every random draw in a run comes from a ChaCha stream keyed by hashing the
//! master seed with a purpose tag and coordinates (round, client id), so the
//! draws a client sees do not depend on scheduling or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub const TAG_DATA: u64 = 0x6461_7461;
pub const TAG_TEST_DATA: u64 = 0x7465_7374;
pub const TAG_PARTITION: u64 = 0x7061_7274;
pub const TAG_INIT: u64 = 0x696e_6974;
pub const TAG_SELECT: u64 = 0x7365_6c65;
pub const TAG_CLIENT: u64 = 0x636c_6e74;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Hash a master seed together with an ordered list of coordinates.
pub fn derive(master: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(splitmix64(master), |acc, &p| {
        splitmix64(acc ^ splitmix64(p))
    })
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn derived_rng(master: u64, parts: &[u64]) -> Rng {
    rng(derive(master, parts))
}
