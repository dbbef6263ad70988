//! Deterministic seed derivation for independent rng substreams.

/// splitmix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derive a child seed from a base seed and two stream indices. Distinct
/// index pairs give independent streams; the derivation is pure.
pub fn derive_seed(base: u64, a: u64, b: u64) -> u64 {
    mix(mix(base ^ 0x517cc1b727220a95).wrapping_add(a).wrapping_mul(0x2545f4914f6cdd1d) ^ b)
}
