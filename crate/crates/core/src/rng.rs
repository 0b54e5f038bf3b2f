//! Deterministic derivation of independent RNG stream seeds.

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with two stream labels so that distinct labels give
/// statistically independent streams and the result never depends on how
/// many other streams were drawn.
pub fn stream_seed(seed: u64, a: u64, b: u64) -> u64 {
    splitmix64(seed ^ splitmix64(a) ^ splitmix64(splitmix64(b)))
}
