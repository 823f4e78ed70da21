//! Seeded 64-bit mixing shared by the Bloom filter, the data generator and
//! the shuffle stage. Each caller folds its own domain tag into the seed so
//! the hash families stay independent of each other.

/// SplitMix64 finalizer. Full-avalanche permutation of the input word.
#[inline]
pub fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Maps a mixed word onto [0, 1).
#[inline]
pub fn unit_f64(h: u64) -> f64 {
    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}
