use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::dataset::{gen_zipf, ingest_csv_with, Dataset, KeyOrder, DEFAULT_MAX_RANK};
use crate::error::{Error, Result};
use crate::hashing::derive_seed;
use crate::model::Hyperparams;

pub const CONFIG_VERSION: u32 = 1;

/// Seed derivation tags; each random stream in a run is
/// `derive_seed(seed, tag, index)`.
pub mod tags {
    pub const DATASET: u64 = 1;
    pub const HASH: u64 = 2;
    pub const SAMPLE: u64 = 3;
    pub const CLIENT: u64 = 4;
    pub const TRAIN: u64 = 5;
    pub const TRIAL: u64 = 6;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mechanism {
    Ldplcm,
    AppleCms,
}

impl std::str::FromStr for Mechanism {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ldplcm" => Ok(Mechanism::Ldplcm),
            "apple-cms" => Ok(Mechanism::AppleCms),
            other => Err(Error::parameter(format!(
                "unknown mechanism {other:?}, expected ldplcm or apple-cms"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Zipf {
        n: u64,
        s: f64,
        #[serde(default = "default_max_rank")]
        max_rank: u64,
        /// Overrides the seed derived from the run seed.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
    Csv {
        path: PathBuf,
        #[serde(default)]
        order: KeyOrder,
    },
}

fn default_max_rank() -> u64 {
    DEFAULT_MAX_RANK
}

impl DatasetSpec {
    /// Materializes the dataset; `run_seed` feeds generators without an explicit seed.
    pub fn load(&self, run_seed: u64) -> Result<Dataset> {
        match self {
            DatasetSpec::Zipf {
                n,
                s,
                max_rank,
                seed,
            } => gen_zipf(
                *n,
                *s,
                *max_rank,
                seed.unwrap_or_else(|| derive_seed(run_seed, tags::DATASET, 0)),
            ),
            DatasetSpec::Csv { path, order } => ingest_csv_with(path, *order),
        }
    }
}

/// Full parameterization of one protocol run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_version")]
    pub version: u32,
    #[serde(default = "default_mechanism")]
    pub mechanism: Mechanism,
    pub epsilon: f64,
    pub m: usize,
    pub k: usize,
    pub r: f64,
    pub theta: f64,
    #[serde(default = "default_t")]
    pub t: usize,
    #[serde(default = "default_hyper")]
    pub hyperparameters: Hyperparams,
    pub dataset: DatasetSpec,
    pub seed: u64,
    #[serde(default = "default_trials")]
    pub trials: usize,
}

fn default_version() -> u32 {
    CONFIG_VERSION
}
fn default_mechanism() -> Mechanism {
    Mechanism::Ldplcm
}
fn default_t() -> usize {
    10_000
}
fn default_hyper() -> Hyperparams {
    Hyperparams::SMALL_DOMAIN
}
fn default_trials() -> usize {
    10
}

impl Default for ExperimentConfig {
    /// Desk-scale Zipf configuration.
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            mechanism: Mechanism::Ldplcm,
            epsilon: 4.0,
            m: 128,
            k: 16,
            r: 0.1,
            theta: 0.5,
            t: default_t(),
            hyperparameters: Hyperparams::SMALL_DOMAIN,
            dataset: DatasetSpec::Zipf {
                n: 100_000,
                s: 1.1,
                max_rank: DEFAULT_MAX_RANK,
                seed: None,
            },
            seed: 1,
            trials: default_trials(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::parameter(format!(
                "unsupported config version {}, expected {CONFIG_VERSION}",
                self.version
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::parameter(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if !(self.r > 0.0 && self.r < 1.0) {
            return Err(Error::parameter(format!("r must lie in (0, 1), got {}", self.r)));
        }
        if !(self.theta > 0.0 && self.theta <= 1.0) {
            return Err(Error::parameter(format!("theta must lie in (0, 1], got {}", self.theta)));
        }
        if self.m < 2 {
            return Err(Error::parameter(format!("m must be at least 2, got {}", self.m)));
        }
        if self.k == 0 || self.k > 1 << 16 {
            return Err(Error::parameter(format!("k must lie in [1, 65536], got {}", self.k)));
        }
        if self.seed > i64::MAX as u64 {
            return Err(Error::parameter(format!("seed must be below 2^63, got {}", self.seed)));
        }
        if self.t == 0 {
            return Err(Error::parameter("t must be at least 1"));
        }
        if self.trials == 0 {
            return Err(Error::parameter("trials must be at least 1"));
        }
        self.hyperparameters.validate()?;
        if let DatasetSpec::Zipf { n, s, max_rank, .. } = &self.dataset {
            if *n == 0 || *max_rank == 0 || !(*s >= 0.0 && s.is_finite()) {
                return Err(Error::parameter("zipf dataset needs n >= 1, s >= 0, max_rank >= 1"));
            }
        }
        Ok(())
    }

    /// Parses TOML or JSON, chosen by file extension (TOML otherwise).
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        let cfg = if is_json {
            Self::from_json(&text)
        } else {
            Self::from_toml(&text)
        }
        .map_err(|e| match e {
            Error::Parameter(detail) => Error::Parse {
                path: path.to_path_buf(),
                line: 0,
                detail,
            },
            other => other,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::parameter(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::parameter(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes to JSON")
    }

    /// Seed of trial `i`; trial 0 uses the configured seed itself. Derived
    /// seeds keep 63 bits so they stay representable as TOML integers.
    pub fn trial_seed(&self, i: usize) -> u64 {
        if i == 0 {
            self.seed
        } else {
            derive_seed(self.seed, tags::TRIAL, i as u64) >> 1
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }
}
