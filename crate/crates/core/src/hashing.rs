//! Seeded hash families shared by every sketch, client and server.
//!
//! Row `j` of a family owns two 64-bit seeds, one for the column hash and one
//! for the sign hash. Both are derived from the family's master seed, so a
//! `(k, m, master_seed)` triple fully determines every hash output on any
//! machine.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A domain element.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ItemKey(pub u64);

impl ItemKey {
    pub fn get(self) -> u64 {
        self.0
    }
}

impl From<u64> for ItemKey {
    fn from(value: u64) -> Self {
        Self(value)
    }
}

impl std::fmt::Display for ItemKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.0.fmt(f)
    }
}

/// SplitMix64 finalizer.
#[inline]
pub fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Derives a child seed from `(base, tag, index)`.
///
/// Every random stream in the crate is rooted in one user-supplied seed and
/// reaches its consumer through this function.
pub fn derive_seed(base: u64, tag: u64, index: u64) -> u64 {
    mix64(mix64(base ^ mix64(tag)) ^ index)
}

/// `k` hash functions onto `[0, m)`, each paired with a `{-1, +1}` sign hash.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HashFamily {
    k: usize,
    m: usize,
    master_seed: u64,
    column_seeds: Vec<u64>,
    sign_seeds: Vec<u64>,
}

impl HashFamily {
    pub fn new(k: usize, m: usize, master_seed: u64) -> Result<Self> {
        if k == 0 {
            return Err(Error::parameter("hash family needs k >= 1"));
        }
        if m == 0 {
            return Err(Error::parameter("hash family needs m >= 1"));
        }
        let column_seeds = (0..k as u64)
            .map(|j| mix64(master_seed ^ mix64(2 * j)))
            .collect();
        let sign_seeds = (0..k as u64)
            .map(|j| mix64(master_seed ^ mix64(2 * j + 1)))
            .collect();
        Ok(Self {
            k,
            m,
            master_seed,
            column_seeds,
            sign_seeds,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    fn check_row(&self, j: usize) -> Result<()> {
        if j >= self.k {
            return Err(Error::contract(format!(
                "row index {j} out of range for k = {}",
                self.k
            )));
        }
        Ok(())
    }

    /// Column of `d` in row `j`.
    pub fn hash_column(&self, j: usize, d: ItemKey) -> Result<usize> {
        self.check_row(j)?;
        Ok(self.column(j, d))
    }

    /// Sign of `d` in row `j`, either `-1` or `+1`.
    pub fn hash_sign(&self, j: usize, d: ItemKey) -> Result<i8> {
        self.check_row(j)?;
        Ok(self.sign(j, d))
    }

    #[inline]
    pub(crate) fn column(&self, j: usize, d: ItemKey) -> usize {
        (mix64(self.column_seeds[j] ^ d.0) % self.m as u64) as usize
    }

    #[inline]
    pub(crate) fn sign(&self, j: usize, d: ItemKey) -> i8 {
        if mix64(self.sign_seeds[j] ^ d.0) & 1 == 1 {
            1
        } else {
            -1
        }
    }

    /// Columns of `d` in every row, in row order.
    pub fn columns(&self, d: ItemKey) -> impl Iterator<Item = usize> + '_ {
        (0..self.k).map(move |j| self.column(j, d))
    }

    /// `(column, sign)` of `d` in every row, in row order.
    pub fn signed_columns(&self, d: ItemKey) -> impl Iterator<Item = (usize, i8)> + '_ {
        (0..self.k).map(move |j| (self.column(j, d), self.sign(j, d)))
    }

    /// True when `other` produces identical outputs.
    pub fn same_as(&self, other: &HashFamily) -> bool {
        self.k == other.k && self.m == other.m && self.master_seed == other.master_seed
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn column_is_deterministic() {
        let family = HashFamily::new(4, 97, 11).unwrap();
        let a = family.hash_column(0, ItemKey(42)).unwrap();
        let b = family.hash_column(0, ItemKey(42)).unwrap();
        assert_eq!(a, b);
        let rebuilt = HashFamily::new(4, 97, 11).unwrap();
        assert_eq!(rebuilt.hash_column(0, ItemKey(42)).unwrap(), a);
    }

    #[test]
    fn single_column_range() {
        let family = HashFamily::new(5, 1, 3).unwrap();
        for j in 0..5 {
            for d in [0u64, 1, 17, u64::MAX] {
                assert_eq!(family.hash_column(j, ItemKey(d)).unwrap(), 0);
            }
        }
    }

    #[test]
    fn row_out_of_range_is_contract_error() {
        let family = HashFamily::new(3, 8, 0).unwrap();
        assert!(matches!(family.hash_column(3, ItemKey(1)), Err(Error::Contract(_))));
        assert!(matches!(family.hash_sign(7, ItemKey(1)), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_sizes_rejected() {
        assert!(HashFamily::new(0, 8, 0).is_err());
        assert!(HashFamily::new(2, 0, 0).is_err());
    }

    // Golden values recorded from the SplitMix64-based construction.
    #[test]
    fn golden_column() {
        let family = HashFamily::new(8, 1024, 0xDEAD_BEEF).unwrap();
        assert_eq!(family.hash_column(3, ItemKey(17)).unwrap(), GOLDEN_COLUMN);
    }

    #[test]
    fn golden_sign() {
        let family = HashFamily::new(1, 16, 1).unwrap();
        assert_eq!(family.hash_sign(0, ItemKey(0)).unwrap(), GOLDEN_SIGN);
    }

    const GOLDEN_COLUMN: usize = 384;
    const GOLDEN_SIGN: i8 = 1;

    #[test]
    fn sign_balance_within_three_sigma() {
        let family = HashFamily::new(4, 64, 99).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let trials = 100_000u64;
        let plus = (0..trials)
            .filter(|_| family.hash_sign(2, ItemKey(rng.random())).unwrap() == 1)
            .count() as f64;
        let sigma = (trials as f64 * 0.25).sqrt();
        assert!((plus - trials as f64 / 2.0).abs() <= 3.0 * sigma, "plus = {plus}");
    }

    #[test]
    fn pairwise_row_collisions_near_one_over_m() {
        let m = 64usize;
        let family = HashFamily::new(2, m, 1234).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let keys: Vec<ItemKey> = (0..10_000).map(|_| ItemKey(rng.random())).collect();
        let same = keys
            .iter()
            .filter(|&&d| family.column(0, d) == family.column(1, d))
            .count() as f64;
        let p = 1.0 / m as f64;
        let n = keys.len() as f64;
        let sigma = (n * p * (1.0 - p)).sqrt();
        assert!((same - n * p).abs() <= 3.0 * sigma, "same = {same}");
    }

    #[test]
    fn columns_roughly_uniform() {
        // chi-square sanity at the 99.9% level for 15 degrees of freedom
        let m = 16usize;
        let family = HashFamily::new(1, m, 42).unwrap();
        let mut counts = vec![0f64; m];
        let n = 32_000u64;
        for d in 0..n {
            counts[family.column(0, ItemKey(d))] += 1.0;
        }
        let expected = n as f64 / m as f64;
        let chi2: f64 = counts.iter().map(|c| (c - expected).powi(2) / expected).sum();
        assert!(chi2 < 37.70, "chi2 = {chi2}");
    }
}
