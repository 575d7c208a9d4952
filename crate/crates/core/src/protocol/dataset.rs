use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hashing::ItemKey;

/// Default rank cap for generated Zipf data.
pub const DEFAULT_MAX_RANK: u64 = 1_000_000;

/// A multiset of client items over a dense key domain `0..domain_size`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    records: Vec<ItemKey>,
    counts: Vec<u64>,
    labels: Vec<String>,
}

impl Dataset {
    /// Builds a dataset, tallying ground truth. `labels[d]` names key `d`.
    pub fn new(records: Vec<ItemKey>, labels: Vec<String>) -> Result<Self> {
        let mut counts = vec![0u64; labels.len()];
        for (i, d) in records.iter().enumerate() {
            let slot = counts.get_mut(d.0 as usize).ok_or_else(|| {
                Error::parameter(format!(
                    "record {i} has key {d} outside the domain of size {}",
                    labels.len()
                ))
            })?;
            *slot += 1;
        }
        Ok(Self {
            records,
            counts,
            labels,
        })
    }

    /// Dataset over keys `0..domain_size`, labelled by their decimal value.
    pub fn from_keys(records: Vec<ItemKey>, domain_size: u64) -> Result<Self> {
        Self::new(records, (0..domain_size).map(|d| d.to_string()).collect())
    }

    pub fn records(&self) -> &[ItemKey] {
        &self.records
    }

    pub fn n(&self) -> usize {
        self.records.len()
    }

    pub fn domain_size(&self) -> u64 {
        self.counts.len() as u64
    }

    /// Exact frequencies indexed by key.
    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn true_count(&self, d: ItemKey) -> u64 {
        self.counts.get(d.0 as usize).copied().unwrap_or(0)
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn label(&self, d: ItemKey) -> Option<&str> {
        self.labels.get(d.0 as usize).map(String::as_str)
    }

    pub fn items(&self) -> impl Iterator<Item = ItemKey> {
        (0..self.domain_size()).map(ItemKey)
    }

    /// Writes one key per line in record order.
    pub fn write_records(&self, path: &Path) -> Result<()> {
        let mut out = create(path)?;
        for d in &self.records {
            writeln!(out, "{d}").map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }

    /// Writes `key,label,count` rows for the whole domain.
    pub fn write_counts(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        w.write_record(["key", "label", "count"])
            .map_err(|e| csv_error(path, e))?;
        for (d, (label, count)) in self.labels.iter().zip(&self.counts).enumerate() {
            w.write_record([d.to_string(), label.clone(), count.to_string()])
                .map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Writes the key-to-token mapping as `key,token` rows.
    pub fn write_key_map(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        w.write_record(["key", "token"]).map_err(|e| csv_error(path, e))?;
        for (d, label) in self.labels.iter().enumerate() {
            w.write_record([d.to_string(), label.clone()])
                .map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            detail: format!("{other:?}"),
        },
    }
}

/// Reads a mapping written by [`Dataset::write_key_map`]; index `d` holds
/// the token of key `d`.
pub fn read_key_map(path: &Path) -> Result<Vec<String>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let mut tokens = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| csv_error(path, e))?;
        let parse_err = |detail: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            detail,
        };
        if row.len() != 2 {
            return Err(parse_err(format!("expected 2 fields, found {}", row.len())));
        }
        let key: usize = row[0]
            .parse()
            .map_err(|_| parse_err(format!("invalid key {:?}", &row[0])))?;
        if key != tokens.len() {
            return Err(parse_err(format!("expected key {}, found {key}", tokens.len())));
        }
        tokens.push(row[1].to_string());
    }
    Ok(tokens)
}

/// Draws `n` i.i.d. Zipf(`s`) ranks from `1..=max_rank` and compacts the
/// realized ranks to dense keys in ascending rank order, so key 0 is the
/// most probable realized item. Labels hold the original ranks.
pub fn gen_zipf(n: u64, s: f64, max_rank: u64, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::parameter("zipf record count must be at least 1"));
    }
    if !(s >= 0.0 && s.is_finite()) {
        return Err(Error::parameter(format!("zipf exponent must be >= 0, got {s}")));
    }
    if max_rank == 0 {
        return Err(Error::parameter("zipf max rank must be at least 1"));
    }
    let zipf = Zipf::new(max_rank as f64, s)
        .map_err(|e| Error::parameter(format!("zipf distribution: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ranks: Vec<u64> = (0..n).map(|_| zipf.sample(&mut rng) as u64).collect();

    let mut distinct = ranks.clone();
    distinct.sort_unstable();
    distinct.dedup();
    let index: HashMap<u64, u64> = distinct
        .iter()
        .enumerate()
        .map(|(key, &rank)| (rank, key as u64))
        .collect();
    let records = ranks.iter().map(|r| ItemKey(index[r])).collect();
    Dataset::new(records, distinct.iter().map(|r| r.to_string()).collect())
}

/// How ingested tokens are assigned dense keys.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyOrder {
    /// Keys follow first appearance in the file.
    #[default]
    FirstSeen,
    /// Keys follow ascending numeric value; every token must be a number.
    Numeric,
}

/// Reads a file of one token per line, or `token,count` lines, into a
/// dataset with tokens keyed in first-seen order.
pub fn ingest_csv(path: &Path) -> Result<Dataset> {
    ingest_csv_with(path, KeyOrder::FirstSeen)
}

pub fn ingest_csv_with(path: &Path, order: KeyOrder) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;

    let mut tokens: Vec<String> = Vec::new();
    let mut index: HashMap<String, u64> = HashMap::new();
    let mut records = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| csv_error(path, e))?;
        let line = row.position().map_or(0, |p| p.line() as usize);
        let parse_err = |detail: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            detail,
        };
        let (token, count) = match row.len() {
            1 => (&row[0], 1u64),
            2 => {
                let count = row[1]
                    .parse::<u64>()
                    .map_err(|_| parse_err(format!("invalid count {:?}", &row[1])))?;
                (&row[0], count)
            }
            n => return Err(parse_err(format!("expected 1 or 2 fields, found {n}"))),
        };
        if token.is_empty() {
            if row.len() == 1 {
                continue;
            }
            return Err(parse_err("empty item token".into()));
        }
        if order == KeyOrder::Numeric && token.parse::<f64>().is_err() {
            return Err(parse_err(format!("token {token:?} is not numeric")));
        }
        let key = *index.entry(token.to_string()).or_insert_with(|| {
            tokens.push(token.to_string());
            tokens.len() as u64 - 1
        });
        records.extend(std::iter::repeat_n(ItemKey(key), count as usize));
    }

    if order == KeyOrder::Numeric {
        let mut by_value: Vec<usize> = (0..tokens.len()).collect();
        let value = |i: usize| tokens[i].parse::<f64>().unwrap_or(f64::NAN);
        by_value.sort_by(|&a, &b| value(a).total_cmp(&value(b)).then(a.cmp(&b)));
        let mut remap = vec![0u64; tokens.len()];
        for (new, &old) in by_value.iter().enumerate() {
            remap[old] = new as u64;
        }
        for d in &mut records {
            d.0 = remap[d.0 as usize];
        }
        tokens = by_value.into_iter().map(|i| tokens[i].clone()).collect();
    }
    Dataset::new(records, tokens)
}
