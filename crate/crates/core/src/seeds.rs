//! Deterministic seed derivation.
//!
//! Every source of randomness in the simulator is keyed by a seed derived
//! from the master seed plus structural tags (round, client id, purpose),
//! so results are independent of scheduling order.

use rand_chacha::ChaCha12Rng;
use rand_chacha::rand_core::SeedableRng;

/// Purpose tags keep independent random streams from colliding even when
/// their structural coordinates (round, client) are equal.
pub mod purpose {
    pub const KEYGEN: u64 = 0x01;
    pub const DATA: u64 = 0x02;
    pub const PARTITION: u64 = 0x03;
    pub const LOCAL_TRAIN: u64 = 0x04;
    pub const DP_NOISE: u64 = 0x05;
    pub const ENCRYPT: u64 = 0x06;
    pub const ATTACK: u64 = 0x07;
    pub const INIT: u64 = 0x08;
    pub const SMOTE: u64 = 0x09;
    pub const ADV: u64 = 0x0a;
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Fold `tags` into `master` one splitmix step at a time.
pub fn derive(master: u64, tags: &[u64]) -> u64 {
    let mut state = splitmix64(master);
    for &t in tags {
        state = splitmix64(state ^ t.wrapping_mul(0x2545_f491_4f6c_dd1d));
    }
    state
}

/// Deterministic RNG for a derived seed.
pub fn rng(master: u64, tags: &[u64]) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(derive(master, tags))
}
