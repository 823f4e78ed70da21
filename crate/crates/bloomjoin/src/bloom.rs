//! Mergeable Bloom filter over 64-bit keys.
//!
//! Sizing follows the classic rule for a filter with an optimal number of
//! hash functions: `m = ceil(n * 1.44 * log2(1/epsilon))` bits and
//! `k = round((m/n) * ln 2)` hash functions. Bit positions come from double
//! hashing (`h1 + i*h2 mod m`), so a filter is fully determined by
//! `(m_bits, k_hashes, hash_seed)` and two filters with equal parameters
//! merge by bitwise OR.

use crate::error::{Error, Result};
use crate::hash::mix64;

const H2_TAG: u64 = 0x6a09e667f3bcc909;

/// Fixed serialization header: m_bits u64, k_hashes u32, hash_seed u64,
/// inserted_count u64, all little-endian.
pub const HEADER_BYTES: usize = 8 + 4 + 8 + 8;

/// Planned filter parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct BloomParams {
    /// Number of keys the filter was sized for.
    pub n_expected: u64,
    /// Target false-positive probability, in (0, 1).
    pub epsilon: f64,
    /// Filter size in bits.
    pub m_bits: u64,
    /// Number of hash functions.
    pub k_hashes: u32,
    /// Seed of the double-hashing family.
    pub hash_seed: u64,
}

impl BloomParams {
    /// True when two filters with these parameters can be merged: they must
    /// agree on everything that determines bit placement.
    pub fn hash_compatible(&self, other: &BloomParams) -> bool {
        self.m_bits == other.m_bits
            && self.k_hashes == other.k_hashes
            && self.hash_seed == other.hash_seed
    }
}

/// Sizes a filter for `n_expected` keys at target false-positive rate
/// `epsilon`.
pub fn plan_parameters(n_expected: u64, epsilon: f64, hash_seed: u64) -> Result<BloomParams> {
    if n_expected == 0 {
        return Err(Error::InvalidArgument(
            "bloom filter must be planned for at least one key".into(),
        ));
    }
    if !(epsilon > 0.0 && epsilon < 1.0) || !epsilon.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "epsilon must lie in (0, 1), got {epsilon}"
        )));
    }
    let bits = n_expected as f64 * 1.44 * (1.0 / epsilon).log2();
    let m_bits = (bits.ceil() as u64).max(1);
    let k = (m_bits as f64 / n_expected as f64 * std::f64::consts::LN_2).round() as u32;
    Ok(BloomParams {
        n_expected,
        epsilon,
        m_bits,
        k_hashes: k.max(1),
        hash_seed,
    })
}

/// Bit-array Bloom filter. Built by one worker, immutable once complete;
/// completed filters merge by disjunction.
#[derive(Debug, Clone, PartialEq)]
pub struct BloomFilter {
    params: BloomParams,
    bits: Vec<u64>,
    inserted_count: u64,
}

impl BloomFilter {
    pub fn new(params: BloomParams) -> Self {
        let words = (params.m_bits as usize).div_ceil(64);
        BloomFilter {
            params,
            bits: vec![0u64; words],
            inserted_count: 0,
        }
    }

    pub fn params(&self) -> &BloomParams {
        &self.params
    }

    pub fn inserted_count(&self) -> u64 {
        self.inserted_count
    }

    pub fn popcount(&self) -> u64 {
        self.bits.iter().map(|w| w.count_ones() as u64).sum()
    }

    #[inline]
    fn base_hashes(&self, key: u64) -> (u64, u64) {
        let h1 = mix64(key ^ self.params.hash_seed);
        // Odd step so the probe sequence cycles through all residues.
        let h2 = mix64(key ^ self.params.hash_seed ^ H2_TAG) | 1;
        (h1, h2)
    }

    pub fn insert(&mut self, key: u64) {
        let (h1, h2) = self.base_hashes(key);
        let m = self.params.m_bits;
        for i in 0..self.params.k_hashes as u64 {
            let pos = h1.wrapping_add(i.wrapping_mul(h2)) % m;
            self.bits[(pos / 64) as usize] |= 1u64 << (pos % 64);
        }
        self.inserted_count += 1;
    }

    pub fn contains(&self, key: u64) -> bool {
        let (h1, h2) = self.base_hashes(key);
        let m = self.params.m_bits;
        (0..self.params.k_hashes as u64).all(|i| {
            let pos = h1.wrapping_add(i.wrapping_mul(h2)) % m;
            self.bits[(pos / 64) as usize] & (1u64 << (pos % 64)) != 0
        })
    }

    /// Disjunction of two completed filters built with identical hashing
    /// parameters. `inserted_count` adds up, an upper bound on distinct keys.
    pub fn merge(&self, other: &BloomFilter) -> Result<BloomFilter> {
        if !self.params.hash_compatible(&other.params) {
            return Err(Error::IncompatibleFilter(format!(
                "cannot merge (m={}, k={}, seed={:#x}) with (m={}, k={}, seed={:#x})",
                self.params.m_bits,
                self.params.k_hashes,
                self.params.hash_seed,
                other.params.m_bits,
                other.params.k_hashes,
                other.params.hash_seed,
            )));
        }
        let bits = self
            .bits
            .iter()
            .zip(&other.bits)
            .map(|(a, b)| a | b)
            .collect();
        Ok(BloomFilter {
            params: self.params.clone(),
            bits,
            inserted_count: self.inserted_count + other.inserted_count,
        })
    }

    /// Serialized size in bytes: fixed header plus the packed bit array.
    pub fn serialized_len(&self) -> usize {
        HEADER_BYTES + (self.params.m_bits as usize).div_ceil(8)
    }

    /// Little-endian header followed by the bit array packed LSB-first
    /// within each byte.
    pub fn serialize(&self) -> Vec<u8> {
        let body_len = (self.params.m_bits as usize).div_ceil(8);
        let mut out = Vec::with_capacity(HEADER_BYTES + body_len);
        out.extend_from_slice(&self.params.m_bits.to_le_bytes());
        out.extend_from_slice(&self.params.k_hashes.to_le_bytes());
        out.extend_from_slice(&self.params.hash_seed.to_le_bytes());
        out.extend_from_slice(&self.inserted_count.to_le_bytes());
        for word in &self.bits {
            out.extend_from_slice(&word.to_le_bytes());
        }
        out.truncate(HEADER_BYTES + body_len);
        out
    }

    pub fn deserialize(bytes: &[u8]) -> Result<BloomFilter> {
        if bytes.len() < HEADER_BYTES {
            return Err(Error::Deserialize(format!(
                "need at least {HEADER_BYTES} header bytes, got {}",
                bytes.len()
            )));
        }
        let m_bits = u64::from_le_bytes(bytes[0..8].try_into().unwrap());
        let k_hashes = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        let hash_seed = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
        let inserted_count = u64::from_le_bytes(bytes[20..28].try_into().unwrap());
        if m_bits == 0 || k_hashes == 0 {
            return Err(Error::Deserialize(format!(
                "corrupt header: m_bits={m_bits}, k_hashes={k_hashes}"
            )));
        }
        let body_len = (m_bits as usize).div_ceil(8);
        let body = &bytes[HEADER_BYTES..];
        if body.len() != body_len {
            return Err(Error::Deserialize(format!(
                "expected {body_len} body bytes for {m_bits} bits, got {}",
                body.len()
            )));
        }
        let mut bits = vec![0u64; (m_bits as usize).div_ceil(64)];
        for (i, byte) in body.iter().enumerate() {
            bits[i / 8] |= (*byte as u64) << (8 * (i % 8));
        }
        // The header does not carry the planning inputs; reconstruct advisory
        // values from the sizing relations (k ~ 1.44 * ln2 * log2(1/eps)).
        let epsilon =
            2f64.powf(-(k_hashes as f64) / (1.44 * std::f64::consts::LN_2)).clamp(f64::MIN_POSITIVE, 0.999_999);
        let n_expected = ((m_bits as f64 * std::f64::consts::LN_2 / k_hashes as f64).round() as u64).max(1);
        Ok(BloomFilter {
            params: BloomParams {
                n_expected,
                epsilon,
                m_bits,
                k_hashes,
                hash_seed,
            },
            bits,
            inserted_count,
        })
    }

    /// Bit-array equality, ignoring the advisory planning fields.
    pub fn same_bits(&self, other: &BloomFilter) -> bool {
        self.params.hash_compatible(&other.params) && self.bits == other.bits
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::prelude::*;
    use rand::Rng as _;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn plan_matches_sizing_formula() {
        let p = plan_parameters(1000, 0.01, 7).unwrap();
        assert_eq!(p.m_bits, 9568);
        assert_eq!(p.k_hashes, 7);

        let p = plan_parameters(1, 0.5, 7).unwrap();
        assert_eq!(p.m_bits, 2);
        assert_eq!(p.k_hashes, 1);
    }

    #[test]
    fn plan_size_ratio_three_decades() {
        let fine = plan_parameters(1000, 0.001, 0).unwrap();
        let coarse = plan_parameters(1000, 0.1, 0).unwrap();
        // log2(1000)/log2(10) = 3 up to rounding of each operand.
        let diff = fine.m_bits as i64 - 3 * coarse.m_bits as i64;
        assert!(diff.abs() <= 3, "diff = {diff}");
    }

    #[test]
    fn plan_rejects_bad_arguments() {
        assert!(plan_parameters(0, 0.1, 0).is_err());
        assert!(plan_parameters(10, 0.0, 0).is_err());
        assert!(plan_parameters(10, 1.0, 0).is_err());
        assert!(plan_parameters(10, -0.5, 0).is_err());
        assert!(plan_parameters(10, f64::NAN, 0).is_err());
    }

    #[test]
    fn sizing_monotone_in_epsilon() {
        let mut last = 0;
        for eps in [0.5, 0.1, 0.01, 0.001, 1e-4] {
            let p = plan_parameters(1000, eps, 0).unwrap();
            assert!(p.m_bits > last, "m_bits must grow as epsilon shrinks");
            last = p.m_bits;
        }
        // Squaring epsilon doubles the size up to rounding.
        let p1 = plan_parameters(1000, 0.02, 0).unwrap();
        let p2 = plan_parameters(1000, 0.02 * 0.02, 0).unwrap();
        assert!((p2.m_bits as i64 - 2 * p1.m_bits as i64).abs() <= 2);
    }

    #[test]
    fn insert_then_contains() {
        let mut f = BloomFilter::new(plan_parameters(100, 0.01, 3).unwrap());
        for key in [1u64, 42, u64::MAX, 7777] {
            f.insert(key);
            assert!(f.contains(key));
        }
    }

    #[test]
    fn insert_is_idempotent_on_bits() {
        let mut f = BloomFilter::new(plan_parameters(100, 0.01, 3).unwrap());
        f.insert(42);
        let snapshot = f.bits.clone();
        f.insert(42);
        assert_eq!(f.bits, snapshot);
        assert_eq!(f.inserted_count(), 2);
    }

    #[test]
    fn at_most_k_bits_per_key() {
        let params = plan_parameters(1000, 0.01, 9).unwrap();
        let k = params.k_hashes as u64;
        let mut f = BloomFilter::new(params);
        for key in 0..50u64 {
            f.insert(key);
        }
        assert!(f.popcount() <= 50 * k);
    }

    #[test]
    fn empty_filter_contains_nothing() {
        let f = BloomFilter::new(plan_parameters(100, 0.01, 3).unwrap());
        for key in 0..1000u64 {
            assert!(!f.contains(key));
        }
    }

    #[test]
    fn false_positive_rate_near_target() {
        let n = 10_000u64;
        let eps = 0.01;
        let mut f = BloomFilter::new(plan_parameters(n, eps, 11).unwrap());
        for key in 0..n {
            f.insert(key);
        }
        let probes = 200_000u64;
        let fp = (n..n + probes).filter(|&k| f.contains(k)).count() as f64;
        let rate = fp / probes as f64;
        assert!(
            rate >= eps / 2.0 && rate <= eps * 2.0,
            "measured FPR {rate} outside [{}, {}]",
            eps / 2.0,
            eps * 2.0
        );
    }

    #[test]
    fn merge_with_empty_is_identity() {
        let params = plan_parameters(100, 0.01, 5).unwrap();
        let mut f = BloomFilter::new(params.clone());
        for key in 0..100u64 {
            f.insert(key);
        }
        let merged = f.merge(&BloomFilter::new(params)).unwrap();
        assert!(merged.same_bits(&f));
        assert_eq!(merged.serialize()[HEADER_BYTES..], f.serialize()[HEADER_BYTES..]);
    }

    #[test]
    fn merge_rejects_mismatched_params() {
        let a = BloomFilter::new(plan_parameters(100, 0.01, 5).unwrap());
        let b = BloomFilter::new(plan_parameters(100, 0.01, 6).unwrap());
        assert!(matches!(a.merge(&b), Err(Error::IncompatibleFilter(_))));
        let c = BloomFilter::new(plan_parameters(200, 0.01, 5).unwrap());
        assert!(a.merge(&c).is_err());
    }

    proptest! {
        #[test]
        fn merge_equals_sequential_union(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let params = plan_parameters(2000, 0.01, 17).unwrap();
            let s1: Vec<u64> = (0..1000).map(|_| rng.gen()).collect();
            let s2: Vec<u64> = (0..1000).map(|_| rng.gen()).collect();

            let mut a = BloomFilter::new(params.clone());
            let mut b = BloomFilter::new(params.clone());
            let mut both = BloomFilter::new(params);
            for &k in &s1 { a.insert(k); both.insert(k); }
            for &k in &s2 { b.insert(k); both.insert(k); }

            let ab = a.merge(&b).unwrap();
            let ba = b.merge(&a).unwrap();
            prop_assert!(ab.same_bits(&both));
            prop_assert!(ab.same_bits(&ba));
            prop_assert_eq!(ab.inserted_count(), 2000);
        }

        #[test]
        fn no_false_negatives(keys in proptest::collection::vec(any::<u64>(), 1..500)) {
            let mut f = BloomFilter::new(plan_parameters(keys.len() as u64, 0.05, 23).unwrap());
            for &k in &keys { f.insert(k); }
            for &k in &keys { prop_assert!(f.contains(k)); }
        }
    }

    #[test]
    fn serialize_round_trip_is_bit_identical() {
        let mut f = BloomFilter::new(plan_parameters(1000, 0.01, 99).unwrap());
        for key in 0..777u64 {
            f.insert(key * 3);
        }
        let bytes = f.serialize();
        assert_eq!(bytes.len(), HEADER_BYTES + 1196); // ceil(9568/8)
        let g = BloomFilter::deserialize(&bytes).unwrap();
        assert!(g.same_bits(&f));
        assert_eq!(g.inserted_count(), f.inserted_count());
        assert_eq!(g.serialize(), bytes);
    }

    #[test]
    fn deserialize_rejects_truncation_and_garbage() {
        assert!(BloomFilter::deserialize(&[]).is_err());
        assert!(BloomFilter::deserialize(&[0u8; 10]).is_err());
        let f = BloomFilter::new(plan_parameters(100, 0.01, 1).unwrap());
        let mut bytes = f.serialize();
        bytes.pop();
        assert!(BloomFilter::deserialize(&bytes).is_err());
        // Zeroed m_bits in the header.
        let mut bytes = f.serialize();
        bytes[0..8].copy_from_slice(&0u64.to_le_bytes());
        assert!(BloomFilter::deserialize(&bytes).is_err());
    }

    #[test]
    fn golden_bytes_layout() {
        // Header fields little-endian, then packed bits LSB-first.
        let params = BloomParams {
            n_expected: 3,
            epsilon: 0.5,
            m_bits: 10,
            k_hashes: 1,
            hash_seed: 0x0102030405060708,
            };
        let f = BloomFilter::new(params);
        let bytes = f.serialize();
        let mut expect = Vec::new();
        expect.extend_from_slice(&10u64.to_le_bytes());
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&0x0102030405060708u64.to_le_bytes());
        expect.extend_from_slice(&0u64.to_le_bytes());
        expect.extend_from_slice(&[0u8, 0u8]); // ceil(10/8) = 2 body bytes
        assert_eq!(bytes, expect);
    }

    #[test]
    fn determinism_across_insertion_order() {
        let params = plan_parameters(500, 0.01, 31).unwrap();
        let keys: Vec<u64> = (0..500).map(|i| i * 7 + 1).collect();
        let mut forward = BloomFilter::new(params.clone());
        let mut backward = BloomFilter::new(params);
        for &k in &keys {
            forward.insert(k);
        }
        for &k in keys.iter().rev() {
            backward.insert(k);
        }
        assert!(forward.same_bits(&backward));
    }
}
