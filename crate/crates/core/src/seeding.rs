//! Stream-seed derivation.
//!
//! Every randomized stage derives its own generator seed from the run seed,
//! a stage tag, and an index via a splitmix64 chain. Streams are therefore
//! independent of each other and of iteration order, which is what makes
//! mid-run checkpoint resume bit-exact: step `s` draws the same numbers
//! whether the process reached it directly or after a reload.

/// One splitmix64 output step.
pub fn splitmix64(z: u64) -> u64 {
    let mut z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a stream seed from `(seed, tag, index)`.
pub fn mix(seed: u64, tag: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ tag) ^ index)
}

/// Hash a word to a u64 (FNV-1a); used for content-addressed streams.
pub fn hash_word(word: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in word.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}
