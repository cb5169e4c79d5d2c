//! Seeded PRNG used for every source of randomness in the crate.

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

pub type SeededRng = Xoshiro256PlusPlus;

pub fn seeded(seed: u64) -> SeededRng {
    Xoshiro256PlusPlus::seed_from_u64(seed)
}

/// Derives an independent stream for a named purpose from a base seed.
pub fn derive(seed: u64, stream: u64) -> SeededRng {
    let mut rng = seeded(seed);
    rng.jump();
    for _ in 0..stream {
        rng.long_jump();
    }
    rng
}
