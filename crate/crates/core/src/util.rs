//! Small deterministic mixing helpers shared by the lazily materialized
//! structures (transmission functions, tree codes, shared randomness).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// SplitMix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Absorbs one word into a running hash state.
#[inline]
pub fn absorb(state: u64, word: u64) -> u64 {
    mix64(state.wrapping_add(GOLDEN) ^ mix64(word.wrapping_add(0x632b_e59b_d9b4_e019)))
}

/// Hashes a short tuple of words.
pub fn hash_words(words: &[u64]) -> u64 {
    words.iter().fold(0x243f_6a88_85a3_08d3, |h, &w| absorb(h, w))
}

/// A ChaCha stream derived from a master seed and a domain-separation path.
pub fn derived_rng(seed: u64, path: &[u64]) -> ChaCha8Rng {
    let mut words = Vec::with_capacity(path.len() + 1);
    words.push(seed);
    words.extend_from_slice(path);
    ChaCha8Rng::seed_from_u64(hash_words(&words))
}

/// Domain tags for [`derived_rng`].
pub mod stream {
    pub const PARTY: u64 = 1;
    pub const ADVERSARY: u64 = 2;
    pub const SHARED: u64 = 3;
    pub const INPUTS: u64 = 4;
    pub const ROUTING: u64 = 5;
    pub const TRIAL: u64 = 6;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_is_order_sensitive() {
        assert_ne!(hash_words(&[1, 2]), hash_words(&[2, 1]));
        assert_eq!(hash_words(&[7, 9]), hash_words(&[7, 9]));
    }
}
