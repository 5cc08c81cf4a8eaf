//! Deterministic derivation of independent random streams.
//!
//! Every stochastic component draws from its own ChaCha8 stream whose 64-bit
//! seed is `mix(seed, tag, a, b)`: the top-level seed, a component tag and
//! two counters (for example EM iteration and subject index) are folded
//! through the SplitMix64 finalizer. Results therefore do not depend on the
//! order in which streams are consumed or on thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Component tags for stream derivation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Estep = 1,
    Predict = 2,
    SimulateDesign = 3,
    SimulateLatent = 4,
    Replicate = 5,
    FitSeed = 6,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a seed, tag and two counters into a derived 64-bit seed.
pub fn derive_seed(seed: u64, tag: Stream, a: u64, b: u64) -> u64 {
    let mut h = splitmix(seed);
    h = splitmix(h ^ tag as u64);
    h = splitmix(h ^ a);
    splitmix(h ^ b.rotate_left(32))
}

pub fn stream(seed: u64, tag: Stream, a: u64, b: u64) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(seed, tag, a, b))
}
