//! Stateless seed derivation so any sample or step can be regenerated
//! without replaying a stream.

/// SplitMix64 finalizer over `a ⊕ rotated b`.
pub fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.rotate_left(25) ^ 0x9E37_79B9_7F4A_7C15;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds several words into one seed.
pub fn derive(parts: &[u64]) -> u64 {
    parts.iter().fold(0x243F_6A88_85A3_08D3, |acc, &p| mix(acc, p))
}
