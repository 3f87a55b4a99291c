//! Deterministic derivation of independent RNG seeds from one run seed.

/// SplitMix64 finalizer over `(base, stream)`; distinct streams give
/// unrelated seeds.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

// stream tags
pub(crate) const SHUFFLE: u64 = 0x5348_5546;
pub(crate) const DROPOUT: u64 = 0x4452_4f50;
pub(crate) const BOOTSTRAP: u64 = 0x424f_4f54;
