//! Seed derivation.
//!
//! A single user seed fans out to per-stage seeds with splitmix64: the seed
//! for stage `k` is the `k`-th output of a splitmix64 generator whose state
//! starts at the user seed. Stage indices are listed in [`Stage`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One splitmix64 step: advances `state` and returns the mixed output.
pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Pipeline stages that consume randomness, with their fixed derivation index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Synth = 1,
    ClassTable = 2,
    Split = 3,
    Train = 4,
    Saliency = 5,
}

pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut state = seed;
    let mut out = 0;
    for _ in 0..index {
        out = splitmix64(&mut state);
    }
    out
}

pub fn stage_seed(seed: u64, stage: Stage) -> u64 {
    derive_seed(seed, stage as u64)
}

/// Portable, seedable generator used throughout the crate.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
