//! Derivation of per-task seeds from a master seed.

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a seed from a master seed and a path of integer labels.
pub fn derive(master: u64, path: &[u64]) -> u64 {
    path.iter().fold(mix(master), |acc, &p| mix(acc ^ mix(p)))
}

/// Stable integer label for a string, for use in [`derive`] paths.
pub fn label(s: &str) -> u64 {
    // FNV-1a
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}
