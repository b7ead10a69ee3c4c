//! Seed derivation for independent, reproducible random streams.
//!
//! Every stochastic step draws from its own ChaCha stream keyed by the run
//! seed plus a purpose tag and coordinates (round, client, epoch). Results
//! therefore do not depend on the order in which clients are processed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags for derived streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Select = 2,
    Batch = 3,
    Partition = 4,
    Split = 5,
    Synth = 6,
    LocalTrain = 7,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a seed with any number of coordinates into a new 64-bit seed.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(splitmix(seed), |acc, &p| splitmix(acc ^ splitmix(p)))
}

/// RNG for `(seed, stream, coordinates...)`.
pub fn stream(seed: u64, kind: Stream, coords: &[u64]) -> ChaCha8Rng {
    let mut parts = Vec::with_capacity(coords.len() + 1);
    parts.push(kind as u64);
    parts.extend_from_slice(coords);
    ChaCha8Rng::seed_from_u64(derive_seed(seed, &parts))
}
