//! Seeded random streams.
//!
//! Every random draw in the crate comes from a named sub-stream of one root
//! seed, so toggling one mechanism (say, k-means) never perturbs the
//! randomness another mechanism sees.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a, used only to turn stream names into stream ids.
fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// A deterministic generator for the sub-stream `name` of `root_seed`.
pub fn substream(root_seed: u64, name: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(root_seed);
    rng.set_stream(fnv1a64(name.as_bytes()));
    rng
}
