//! Seeded random streams.
//!
//! Every random decision in the crate draws from a ChaCha8 generator keyed by
//! a 64-bit seed and a fixed stream label, so results never depend on the
//! order in which unrelated components consume randomness.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Generator for `(seed, stream)`. Distinct streams of one seed are independent.
pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Derives a child seed from a parent seed and a label.
pub fn derive_seed(seed: u64, label: u64) -> u64 {
    stream(seed, label).next_u64()
}
