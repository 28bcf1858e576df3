//! Named, splittable random streams.
//!
//! Every consumer of randomness derives its own ChaCha stream from the run
//! seed and a stream name, so that reseeding one component (data, init,
//! shuffle) never perturbs the others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

/// Seed of the child stream `name` under `seed`.
pub fn child_seed(seed: u64, name: &str) -> u64 {
    splitmix64(seed ^ fnv1a(name))
}

/// Generator for the named stream.
pub fn stream(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(child_seed(seed, name))
}

/// Generator for item `index` of the named stream. Items are independent
/// ChaCha streams, so they can be produced in any order or concurrently.
pub fn indexed_stream(seed: u64, name: &str, index: u64) -> ChaCha8Rng {
    let mut rng = stream(seed, name);
    rng.set_stream(index);
    rng
}
