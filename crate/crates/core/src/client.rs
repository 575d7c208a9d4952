//! Client-side encoding and randomized response.
//!
//! A client holds one item. It picks a hash row uniformly at random, encodes
//! the item as a `{-1, +1}^m` vector and flips every coordinate independently
//! with probability `1 / (e^{ε/2} + 1)`. In the second protocol phase a client
//! whose item the published model classifies as high-frequent sends an
//! all-`-1` dummy instead of the one-hot encoding.

use rand::distr::{Bernoulli, Distribution};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hashing::{HashFamily, ItemKey};
use crate::model::{Classification, FrequencyOracle};

/// Privacy budget and the constants derived from it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyParams {
    epsilon: f64,
    p_flip: f64,
    c_epsilon: f64,
}

impl PrivacyParams {
    pub fn new(epsilon: f64) -> Result<Self> {
        derive_privacy(epsilon)
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// Probability that a single coordinate is negated.
    pub fn p_flip(&self) -> f64 {
        self.p_flip
    }

    /// Debiasing constant `(e^{ε/2} + 1) / (e^{ε/2} - 1)`.
    pub fn c_epsilon(&self) -> f64 {
        self.c_epsilon
    }

    /// Exact probability that perturbing `input` yields `output`.
    pub fn perturbation_probability(&self, input: &SignVector, output: &SignVector) -> f64 {
        assert_eq!(input.len(), output.len(), "vector lengths differ");
        let flips = input.hamming_distance(output) as i32;
        let keeps = input.len() as i32 - flips;
        self.p_flip.powi(flips) * (1.0 - self.p_flip).powi(keeps)
    }
}

pub fn derive_privacy(epsilon: f64) -> Result<PrivacyParams> {
    if !epsilon.is_finite() || epsilon <= 0.0 {
        return Err(Error::parameter(format!(
            "privacy budget must be finite and positive, got {epsilon}"
        )));
    }
    let half = (epsilon / 2.0).exp();
    Ok(PrivacyParams {
        epsilon,
        p_flip: 1.0 / (half + 1.0),
        // coth(ε/4), which stays finite when e^{ε/2} overflows
        c_epsilon: 1.0 / (epsilon / 4.0).tanh(),
    })
}

/// A `{-1, +1}` vector stored one bit per coordinate (`+1` is a set bit).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SignVector {
    words: Vec<u64>,
    len: usize,
}

impl SignVector {
    /// All coordinates `-1`.
    pub fn minus_ones(len: usize) -> Self {
        Self {
            words: vec![0; len.div_ceil(64)],
            len,
        }
    }

    pub fn from_signs(signs: &[i8]) -> Result<Self> {
        let mut v = Self::minus_ones(signs.len());
        for (i, &s) in signs.iter().enumerate() {
            match s {
                1 => v.set_plus(i),
                -1 => {}
                other => {
                    return Err(Error::contract(format!(
                        "coordinate {i} is {other}, expected -1 or +1"
                    )))
                }
            }
        }
        Ok(v)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, i: usize) -> i8 {
        assert!(i < self.len, "index {i} out of range for length {}", self.len);
        if self.words[i / 64] >> (i % 64) & 1 == 1 {
            1
        } else {
            -1
        }
    }

    fn set_plus(&mut self, i: usize) {
        self.words[i / 64] |= 1 << (i % 64);
    }

    fn flip(&mut self, i: usize) {
        self.words[i / 64] ^= 1 << (i % 64);
    }

    pub fn to_signs(&self) -> Vec<i8> {
        (0..self.len).map(|i| self.get(i)).collect()
    }

    pub fn sum(&self) -> i64 {
        let plus = self.count_plus() as i64;
        2 * plus - self.len as i64
    }

    pub fn count_plus(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    /// Indices holding `+1`, ascending.
    pub fn plus_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.words.iter().enumerate().flat_map(|(w, &word)| {
            let mut bits = word;
            std::iter::from_fn(move || {
                if bits == 0 {
                    return None;
                }
                let tz = bits.trailing_zeros() as usize;
                bits &= bits - 1;
                Some(w * 64 + tz)
            })
        })
    }

    pub fn hamming_distance(&self, other: &SignVector) -> usize {
        self.words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a ^ b).count_ones() as usize)
            .sum()
    }

    /// Bit-packed bytes, coordinate `i` at bit `i % 8` of byte `i / 8`.
    pub fn to_packed_bytes(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.len.div_ceil(8)];
        for i in self.plus_positions() {
            out[i / 8] |= 1 << (i % 8);
        }
        out
    }

    pub fn from_packed_bytes(bytes: &[u8], len: usize) -> Result<Self> {
        if bytes.len() != len.div_ceil(8) {
            return Err(Error::format(
                "report",
                format!("expected {} vector bytes, found {}", len.div_ceil(8), bytes.len()),
            ));
        }
        let mut v = Self::minus_ones(len);
        for (b, &byte) in bytes.iter().enumerate() {
            for bit in 0..8 {
                if byte >> bit & 1 == 1 {
                    let i = b * 8 + bit;
                    if i >= len {
                        return Err(Error::format("report", "non-zero padding bits"));
                    }
                    v.set_plus(i);
                }
            }
        }
        Ok(v)
    }

    fn padding_is_clear(&self) -> bool {
        match self.len % 64 {
            0 => true,
            tail => self.words.last().is_none_or(|w| w >> tail == 0),
        }
    }
}

/// What a client transmits: a perturbed sign vector and the hash row it used.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Report {
    vector: SignVector,
    row: usize,
}

impl Report {
    pub fn new(vector: SignVector, row: usize) -> Result<Self> {
        if row > u16::MAX as usize {
            return Err(Error::contract(format!("row index {row} does not fit in 16 bits")));
        }
        if !vector.padding_is_clear() {
            return Err(Error::contract("sign vector has stray padding bits"));
        }
        Ok(Self { vector, row })
    }

    pub fn vector(&self) -> &SignVector {
        &self.vector
    }

    pub fn row(&self) -> usize {
        self.row
    }

    /// Wire encoding: row as `u16` little-endian, then the packed vector.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(2 + self.vector.len().div_ceil(8));
        out.extend_from_slice(&(self.row as u16).to_le_bytes());
        out.extend_from_slice(&self.vector.to_packed_bytes());
        out
    }

    /// Inverse of [`Report::to_bytes`] for a sketch of width `m`.
    pub fn from_bytes(bytes: &[u8], m: usize) -> Result<Self> {
        if bytes.len() < 2 {
            return Err(Error::format("report", "record shorter than the row header"));
        }
        let row = u16::from_le_bytes([bytes[0], bytes[1]]) as usize;
        let vector = SignVector::from_packed_bytes(&bytes[2..], m)?;
        Self::new(vector, row)
    }
}

/// Writes reports as `u32` little-endian length-prefixed records.
pub fn write_report_log<W: std::io::Write>(mut out: W, reports: &[Report]) -> std::io::Result<()> {
    for report in reports {
        let bytes = report.to_bytes();
        out.write_all(&(bytes.len() as u32).to_le_bytes())?;
        out.write_all(&bytes)?;
    }
    Ok(())
}

pub fn read_report_log(bytes: &[u8], m: usize) -> Result<Vec<Report>> {
    let mut reports = Vec::new();
    let mut rest = bytes;
    while !rest.is_empty() {
        if rest.len() < 4 {
            return Err(Error::format("report log", "truncated length prefix"));
        }
        let len = u32::from_le_bytes([rest[0], rest[1], rest[2], rest[3]]) as usize;
        rest = &rest[4..];
        if rest.len() < len {
            return Err(Error::format("report log", "truncated record"));
        }
        reports.push(Report::from_bytes(&rest[..len], m)?);
        rest = &rest[len..];
    }
    Ok(reports)
}

/// Per-client random stream.
///
/// The ChaCha key comes from the run seed and the stream id is the client
/// index, so clients never share randomness and results do not depend on the
/// order in which clients are simulated.
#[derive(Debug, Clone)]
pub struct ClientRng {
    inner: ChaCha8Rng,
}

impl ClientRng {
    pub fn new(run_seed: u64, client_index: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(run_seed);
        inner.set_stream(client_index);
        Self { inner }
    }
}

impl RngCore for ClientRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// One-hot encoding of `d` under row `j`: `+1` at `h_j(d)`, `-1` elsewhere.
pub fn encode_low(d: ItemKey, family: &HashFamily, j: usize) -> Result<SignVector> {
    let column = family.hash_column(j, d)?;
    let mut v = SignVector::minus_ones(family.m());
    v.set_plus(column);
    Ok(v)
}

/// The dummy encoding sent for high-frequent items.
pub fn encode_high(m: usize) -> Result<SignVector> {
    if m == 0 {
        return Err(Error::parameter("vector width must be at least 1"));
    }
    Ok(SignVector::minus_ones(m))
}

/// Negates each coordinate independently with probability `p_flip`.
pub fn perturb<R: Rng + ?Sized>(v: &SignVector, params: &PrivacyParams, rng: &mut R) -> SignVector {
    let coin = Bernoulli::new(params.p_flip()).expect("p_flip lies in [0, 1/2]");
    let mut out = v.clone();
    for i in 0..v.len() {
        if coin.sample(rng) {
            out.flip(i);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    /// Sampled clients reporting for model training.
    One,
    /// Remaining clients reporting into the final sketch.
    Two,
}

/// How a client encoded its item before perturbation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Encoding {
    OneHot,
    Dummy,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientReport {
    pub report: Report,
    pub encoding: Encoding,
}

/// Runs the client side of the protocol for one item.
///
/// Phase two requires a model with its boundary set; an item is treated as
/// high-frequent when its prediction is at least the boundary.
pub fn client_report<R: Rng + ?Sized>(
    d: ItemKey,
    phase: Phase,
    model: Option<&dyn FrequencyOracle>,
    params: &PrivacyParams,
    family: &HashFamily,
    rng: &mut R,
) -> Result<ClientReport> {
    let encoding = match phase {
        Phase::One => Encoding::OneHot,
        Phase::Two => {
            let model = model.ok_or_else(|| {
                Error::contract("phase-two client report requires a frequency model")
            })?;
            match model.classify(d)? {
                Classification::High { .. } => Encoding::Dummy,
                Classification::Low => Encoding::OneHot,
            }
        }
    };
    let j = rng.random_range(0..family.k());
    let encoded = match encoding {
        Encoding::OneHot => encode_low(d, family, j)?,
        Encoding::Dummy => encode_high(family.m())?,
    };
    let report = Report::new(perturb(&encoded, params, rng), j)?;
    Ok(ClientReport { report, encoding })
}
