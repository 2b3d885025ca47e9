//! Counter-keyed random streams.
//!
//! A stream is identified by a tuple of integers (seed, iteration, sample,
//! step, ...). Keys are mixed with SplitMix64 and used to seed an independent
//! ChaCha8 generator, so any single draw can be regenerated without replaying
//! the ones before it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a tuple of counters into one 64-bit key.
pub fn stream_key(parts: &[u64]) -> u64 {
    parts.iter().fold(0x6A09_E667_F3BC_C908, |acc, &p| {
        splitmix64(acc ^ splitmix64(p))
    })
}

pub fn stream(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_key(parts))
}

/// Fills `out` with independent N(0, std²) draws.
pub fn fill_normal(rng: &mut ChaCha8Rng, std: f64, out: &mut [f64]) {
    for v in out {
        let z: f64 = StandardNormal.sample(rng);
        *v = std * z;
    }
}
