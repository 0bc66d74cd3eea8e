//! Keyed random streams.
//!
//! Every consumer of randomness derives its own generator from the trial seed
//! plus a purpose tag and indices, so one consumer never shifts another's
//! draws and resumed runs reproduce uninterrupted ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const CLASS_ORDER: u64 = 0x636c_6173;
pub const FEW_SHOT: u64 = 0x6361_7073;
pub const AUGMENT: u64 = 0x6175_676d;
pub const SHUFFLE: u64 = 0x7368_7566;
pub const REPLAY: u64 = 0x7265_706c;
pub const INIT: u64 = 0x696e_6974;
pub const PROBE: u64 = 0x7072_6f62;
pub const SYNTHETIC: u64 = 0x7379_6e74;

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Hash of a seed and a key path.
pub fn derive_seed(seed: u64, keys: &[u64]) -> u64 {
    keys.iter().fold(splitmix(seed), |acc, &k| splitmix(acc ^ splitmix(k)))
}

pub fn keyed_rng(seed: u64, keys: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, keys))
}
