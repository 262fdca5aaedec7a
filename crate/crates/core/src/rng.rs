//! Keyed random streams.
//!
//! Every random decision in the pipeline draws from a ChaCha stream whose seed
//! is derived from `(master_seed, index, purpose)`, so results never depend on
//! the order in which independent jobs are scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3))
}

/// Derive a 64-bit seed from a master seed, an index and a purpose tag.
pub fn derive_seed(master: u64, index: u64, purpose: &str) -> u64 {
    let mut h = splitmix64(master);
    h = splitmix64(h ^ index.wrapping_mul(0xd6e8_feb8_6659_fd93));
    splitmix64(h ^ fnv1a(purpose.as_bytes()))
}

/// A deterministic RNG for the keyed stream `(master, index, purpose)`.
pub fn keyed_rng(master: u64, index: u64, purpose: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, index, purpose))
}
