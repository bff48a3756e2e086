//! Deterministic seed derivation.
//!
//! All randomness in the workspace flows from explicit seeds. Sub-tasks
//! (per-record generation, per-fold training, per-net initialization) derive
//! their own seed with [`mix_seed`] so that task ordering and thread
//! scheduling never affect results.

/// SplitMix64 finalizer.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent stream seed from a base seed and two tags.
pub fn mix_seed(base: u64, tag_a: u64, tag_b: u64) -> u64 {
    splitmix64(splitmix64(base ^ 0xA076_1D64_78BD_642F).wrapping_add(splitmix64(tag_a)) ^ tag_b)
}
