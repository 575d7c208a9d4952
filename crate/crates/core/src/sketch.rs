//! Count-Min, Count and the aggregate sketch built from LDP reports.

use std::path::Path;

use crate::client::{PrivacyParams, Report};
use crate::error::{Error, Result};
use crate::hashing::{HashFamily, ItemKey};

/// Plain Count-Min sketch with `k` rows of `m` counters.
#[derive(Debug, Clone)]
pub struct CountMinSketch {
    family: HashFamily,
    counts: Vec<u64>,
}

impl CountMinSketch {
    pub fn new(family: HashFamily) -> Self {
        let counts = vec![0; family.k() * family.m()];
        Self { family, counts }
    }

    /// Sizes the sketch from its error guarantees: `m = ⌈e/ε⌉`, `k = ⌈ln(1/δ)⌉`.
    pub fn with_error_bounds(eps: f64, delta: f64, seed: u64) -> Result<Self> {
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(Error::parameter(format!("error bound must be positive, got {eps}")));
        }
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::parameter(format!("failure probability must lie in (0, 1), got {delta}")));
        }
        let m = (std::f64::consts::E / eps).ceil() as usize;
        let k = ((1.0 / delta).ln().ceil() as usize).max(1);
        Ok(Self::new(HashFamily::new(k, m, seed)?))
    }

    pub fn family(&self) -> &HashFamily {
        &self.family
    }

    pub fn update(&mut self, x: ItemKey) {
        let m = self.family.m();
        for (j, col) in self.family.columns(x).enumerate() {
            self.counts[j * m + col] += 1;
        }
    }

    pub fn estimate(&self, x: ItemKey) -> u64 {
        let m = self.family.m();
        self.family
            .columns(x)
            .enumerate()
            .map(|(j, col)| self.counts[j * m + col])
            .min()
            .unwrap_or(0)
    }

    pub fn cell(&self, j: usize, col: usize) -> u64 {
        self.counts[j * self.family.m() + col]
    }

    pub fn row_sum(&self, j: usize) -> u64 {
        let m = self.family.m();
        self.counts[j * m..(j + 1) * m].iter().sum()
    }
}

/// Count sketch: each row adds the item's sign instead of one.
#[derive(Debug, Clone)]
pub struct CountSketch {
    family: HashFamily,
    counts: Vec<i64>,
}

impl CountSketch {
    pub fn new(family: HashFamily) -> Self {
        let counts = vec![0; family.k() * family.m()];
        Self { family, counts }
    }

    pub fn family(&self) -> &HashFamily {
        &self.family
    }

    pub fn update(&mut self, x: ItemKey) {
        let m = self.family.m();
        for (j, (col, sign)) in self.family.signed_columns(x).enumerate() {
            self.counts[j * m + col] += sign as i64;
        }
    }

    /// Mean over rows of the sign-corrected counters.
    pub fn estimate(&self, x: ItemKey) -> f64 {
        let m = self.family.m();
        let total: i64 = self
            .family
            .signed_columns(x)
            .enumerate()
            .map(|(j, (col, sign))| self.counts[j * m + col] * sign as i64)
            .sum();
        total as f64 / self.family.k() as f64
    }

    pub fn cell(&self, j: usize, col: usize) -> i64 {
        self.counts[j * self.family.m() + col]
    }
}

/// Server-side sketch of debiased report contributions.
///
/// A received coordinate `b` of a report for row `j` adds `k (c_ε b + 1) / 2`
/// to cell `(j, col)`. Each contribution takes only two values, so the sketch
/// keeps integer tallies (reports per row, `+1` coordinates per cell) and
/// materializes a cell as `k/2 · (c_ε (2·plus − reports) + reports)`. Every
/// cell is therefore a pure function of the set of absorbed reports,
/// independent of absorption or merge order.
#[derive(Debug, Clone)]
pub struct AggregateSketch {
    family: HashFamily,
    params: PrivacyParams,
    plus: Vec<u64>,
    row_reports: Vec<u64>,
    n: u64,
    theta: Option<f64>,
}

const SKETCH_MAGIC: &[u8; 4] = b"LDPS";
const SKETCH_VERSION: u16 = 1;

impl AggregateSketch {
    pub fn new(family: HashFamily, params: PrivacyParams) -> Result<Self> {
        if family.m() < 2 {
            return Err(Error::parameter(
                "aggregate sketch needs m >= 2; the estimator divides by m - 1",
            ));
        }
        if family.k() > u16::MAX as usize + 1 {
            return Err(Error::parameter("k must fit the 16-bit report row index"));
        }
        Ok(Self {
            plus: vec![0; family.k() * family.m()],
            row_reports: vec![0; family.k()],
            family,
            params,
            n: 0,
            theta: None,
        })
    }

    /// A fresh sketch with the same parameters.
    pub fn empty_like(&self) -> Self {
        Self {
            family: self.family.clone(),
            params: self.params,
            plus: vec![0; self.plus.len()],
            row_reports: vec![0; self.row_reports.len()],
            n: 0,
            theta: self.theta,
        }
    }

    pub fn family(&self) -> &HashFamily {
        &self.family
    }

    pub fn params(&self) -> &PrivacyParams {
        &self.params
    }

    pub fn k(&self) -> usize {
        self.family.k()
    }

    pub fn m(&self) -> usize {
        self.family.m()
    }

    /// Number of reports absorbed.
    pub fn n(&self) -> u64 {
        self.n
    }

    pub fn theta(&self) -> Option<f64> {
        self.theta
    }

    pub fn set_theta(&mut self, theta: Option<f64>) {
        self.theta = theta;
    }

    pub fn row_reports(&self, j: usize) -> u64 {
        self.row_reports[j]
    }

    pub fn absorb(&mut self, report: &Report) -> Result<()> {
        let m = self.m();
        if report.vector().len() != m {
            return Err(Error::RejectedReport(format!(
                "vector length {} does not match sketch width {m}",
                report.vector().len()
            )));
        }
        let row = report.row();
        if row >= self.k() {
            return Err(Error::RejectedReport(format!(
                "row {row} out of range for k = {}",
                self.k()
            )));
        }
        let base = row * m;
        for col in report.vector().plus_positions() {
            self.plus[base + col] += 1;
        }
        self.row_reports[row] += 1;
        self.n += 1;
        Ok(())
    }

    fn compatible(&self, other: &AggregateSketch) -> Result<()> {
        if !self.family.same_as(&other.family) {
            return Err(Error::Mismatch(format!(
                "hash families differ: (k={}, m={}, seed={}) vs (k={}, m={}, seed={})",
                self.k(),
                self.m(),
                self.family.master_seed(),
                other.k(),
                other.m(),
                other.family.master_seed()
            )));
        }
        if self.params.epsilon().to_bits() != other.params.epsilon().to_bits() {
            return Err(Error::Mismatch(format!(
                "privacy budgets differ: {} vs {}",
                self.params.epsilon(),
                other.params.epsilon()
            )));
        }
        Ok(())
    }

    /// Adds `other` into `self`.
    pub fn merge_from(&mut self, other: &AggregateSketch) -> Result<()> {
        self.compatible(other)?;
        for (a, b) in self.plus.iter_mut().zip(&other.plus) {
            *a += b;
        }
        for (a, b) in self.row_reports.iter_mut().zip(&other.row_reports) {
            *a += b;
        }
        self.n += other.n;
        Ok(())
    }

    pub fn merge(a: &AggregateSketch, b: &AggregateSketch) -> Result<AggregateSketch> {
        let mut out = a.clone();
        out.merge_from(b)?;
        Ok(out)
    }

    #[inline]
    fn materialize(&self, plus: u64, reports: u64) -> f64 {
        let half_k = self.k() as f64 / 2.0;
        let signed = 2 * plus as i64 - reports as i64;
        half_k * (self.params.c_epsilon() * signed as f64 + reports as f64)
    }

    /// Cell `(j, col)` of the real-valued matrix.
    pub fn cell(&self, j: usize, col: usize) -> f64 {
        self.materialize(self.plus[j * self.m() + col], self.row_reports[j])
    }

    /// The matrix in row-major order.
    pub fn matrix(&self) -> Vec<f64> {
        let m = self.m();
        (0..self.k())
            .flat_map(|j| (0..m).map(move |col| (j, col)))
            .map(|(j, col)| self.cell(j, col))
            .collect()
    }

    /// `Σ_l M[l, h_l(d)]`.
    pub fn hashed_sum(&self, d: ItemKey) -> f64 {
        self.family
            .columns(d)
            .enumerate()
            .map(|(j, col)| self.cell(j, col))
            .sum()
    }

    /// Binary encoding: header, per-row report counts, then the matrix as
    /// row-major little-endian `f64`.
    ///
    /// Header layout (little-endian): magic `LDPS`, version `u16`, flags
    /// `u16` (bit 0: θ present), `k: u32`, `m: u32`, `ε: f64`,
    /// `master_seed: u64`, `n: u64`, then `θ: f64` when flagged.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(48 + 8 * (self.k() + self.plus.len()));
        out.extend_from_slice(SKETCH_MAGIC);
        out.extend_from_slice(&SKETCH_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.theta.is_some() as u16).to_le_bytes());
        out.extend_from_slice(&(self.k() as u32).to_le_bytes());
        out.extend_from_slice(&(self.m() as u32).to_le_bytes());
        out.extend_from_slice(&self.params.epsilon().to_le_bytes());
        out.extend_from_slice(&self.family.master_seed().to_le_bytes());
        out.extend_from_slice(&self.n.to_le_bytes());
        if let Some(theta) = self.theta {
            out.extend_from_slice(&theta.to_le_bytes());
        }
        for r in &self.row_reports {
            out.extend_from_slice(&r.to_le_bytes());
        }
        for value in self.matrix() {
            out.extend_from_slice(&value.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut reader = ByteReader { bytes, pos: 0 };
        if reader.take(4)? != SKETCH_MAGIC {
            return Err(Error::format("sketch", "bad magic"));
        }
        let version = reader.u16()?;
        if version != SKETCH_VERSION {
            return Err(Error::format(
                "sketch",
                format!("unsupported version {version}, expected {SKETCH_VERSION}"),
            ));
        }
        let flags = reader.u16()?;
        let k = reader.u32()? as usize;
        let m = reader.u32()? as usize;
        let epsilon = reader.f64()?;
        let seed = reader.u64()?;
        let n = reader.u64()?;
        let theta = if flags & 1 == 1 { Some(reader.f64()?) } else { None };

        let family = HashFamily::new(k, m, seed)?;
        let params = PrivacyParams::new(epsilon)?;
        let mut sketch = Self::new(family, params)?;
        sketch.theta = theta;
        for j in 0..k {
            sketch.row_reports[j] = reader.u64()?;
        }
        if sketch.row_reports.iter().sum::<u64>() != n {
            return Err(Error::format("sketch", "row report counts do not sum to n"));
        }
        sketch.n = n;

        let c = params.c_epsilon();
        let half_k = k as f64 / 2.0;
        for j in 0..k {
            let reports = sketch.row_reports[j];
            for col in 0..m {
                let value = reader.f64()?;
                let signed = ((value / half_k - reports as f64) / c).round();
                let plus = (signed + reports as f64) / 2.0;
                if !(plus >= 0.0 && plus <= reports as f64 && plus.fract() == 0.0) {
                    return Err(Error::format(
                        "sketch",
                        format!("cell ({j}, {col}) is not a valid aggregate"),
                    ));
                }
                let plus = plus as u64;
                if sketch.materialize(plus, reports).to_bits() != value.to_bits() {
                    return Err(Error::format(
                        "sketch",
                        format!("cell ({j}, {col}) does not match its report tallies"),
                    ));
                }
                sketch.plus[j * m + col] = plus;
            }
        }
        if reader.pos != bytes.len() {
            return Err(Error::format("sketch", "trailing bytes"));
        }
        Ok(sketch)
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read_from(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::format("sketch", "truncated"));
        }
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
