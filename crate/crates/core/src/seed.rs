//! Derived random streams.
//!
//! Every stochastic decision draws from a stream keyed by the experiment
//! seed plus a tuple of tags, so results do not depend on call order or on
//! how client work is scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream purposes, kept distinct so no two uses share a key.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    TrainData = 2,
    TestData = 3,
    Partition = 4,
    Select = 5,
    Client = 6,
    Expand = 7,
    Meta = 8,
    Bench = 9,
    Generators = 10,
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic 64-bit key for `(seed, purpose, tags...)`.
pub fn derive(seed: u64, purpose: Purpose, tags: &[u64]) -> u64 {
    let mut h = mix(seed ^ mix(purpose as u64));
    for &t in tags {
        h = mix(h ^ t.wrapping_mul(0xD6E8_FEB8_6659_FD93));
    }
    h
}

pub fn stream(seed: u64, purpose: Purpose, tags: &[u64]) -> Rng {
    Rng::seed_from_u64(derive(seed, purpose, tags))
}
