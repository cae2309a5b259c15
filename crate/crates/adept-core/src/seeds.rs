//! Deterministic seed derivation.
//!
//! Every stochastic component draws from its own ChaCha stream seeded by
//! `derive(base, tags)`. Keeping streams separate (per sample, per epoch,
//! per noise draw) means skipping one consumer — e.g. disabling a loss term
//! — cannot shift the values any other consumer sees.

/// SplitMix64 finalizer: a bijective avalanche over u64.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Fold a tag path into a base seed. Different paths give independent
/// streams; the same path always gives the same stream.
pub fn derive(base: u64, tags: &[u64]) -> u64 {
    let mut state = splitmix64(base ^ 0xA076_1D64_78BD_642F);
    for &tag in tags {
        state = splitmix64(state ^ splitmix64(tag));
    }
    state
}
