//! Seedable, counter-based random streams.
//!
//! Every stochastic routine takes an explicit `&mut Rng`. Independent streams
//! (per sample, per epoch) are derived from a base seed plus a list of stream
//! coordinates so that the order in which streams are consumed never matters.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stream derived from `(seed, coords...)`, e.g. `derive(seed, &[epoch, sample])`.
pub fn derive(seed: u64, coords: &[u64]) -> Rng {
    let mut h = splitmix64(seed ^ 0x5eed_c7f0_0000_0000);
    for &c in coords {
        h = splitmix64(h ^ splitmix64(c.wrapping_add(0x9e37_79b9_7f4a_7c15)));
    }
    ChaCha8Rng::seed_from_u64(h)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
