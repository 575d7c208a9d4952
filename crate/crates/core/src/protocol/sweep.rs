use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{DatasetSpec, ExperimentConfig};
use super::run::{run_protocol, RunResult, RunSummary};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Epsilon,
    M,
    K,
    R,
    Theta,
    S,
    /// Sketch size in KiB of 8-byte cells at fixed `k`; sets `m`.
    Space,
}

impl Axis {
    pub fn as_str(&self) -> &'static str {
        match self {
            Axis::Epsilon => "epsilon",
            Axis::M => "m",
            Axis::K => "k",
            Axis::R => "r",
            Axis::Theta => "theta",
            Axis::S => "s",
            Axis::Space => "space",
        }
    }

    /// `template` with this axis set to `value`.
    pub fn apply(&self, template: &ExperimentConfig, value: f64) -> Result<ExperimentConfig> {
        let mut cfg = template.clone();
        let count = |what: &str| -> Result<usize> {
            if value >= 1.0 && value.fract() == 0.0 && value <= u32::MAX as f64 {
                Ok(value as usize)
            } else {
                Err(Error::parameter(format!("{what} must be a positive integer, got {value}")))
            }
        };
        match self {
            Axis::Epsilon => cfg.epsilon = value,
            Axis::M => cfg.m = count("m")?,
            Axis::K => cfg.k = count("k")?,
            Axis::R => cfg.r = value,
            Axis::Theta => cfg.theta = value,
            Axis::S => match &mut cfg.dataset {
                DatasetSpec::Zipf { s, .. } => *s = value,
                DatasetSpec::Csv { .. } => {
                    return Err(Error::parameter("the s axis needs a zipf dataset"))
                }
            },
            Axis::Space => {
                let cells = value * 1024.0 / 8.0;
                cfg.m = (cells / cfg.k as f64).floor() as usize;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "epsilon" => Axis::Epsilon,
            "m" => Axis::M,
            "k" => Axis::K,
            "r" => Axis::R,
            "theta" => Axis::Theta,
            "s" => Axis::S,
            "space" => Axis::Space,
            other => {
                return Err(Error::parameter(format!(
                    "unknown sweep axis {other:?}, expected one of epsilon, m, k, r, theta, s, space"
                )))
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    /// Mean and sample standard deviation (0 for a single value).
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Stat { mean, std }
    }
}

#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub value: f64,
    pub config: ExperimentConfig,
    pub runs: Vec<RunResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointSummary {
    pub axis: Axis,
    pub value: f64,
    pub sse_total: Stat,
    pub sse_low: Stat,
    pub sse_high: Stat,
    pub mse_total: Stat,
    pub trials: Vec<RunSummary>,
}

impl SweepPoint {
    fn stat(&self, f: impl Fn(&RunResult) -> f64) -> Stat {
        Stat::of(&self.runs.iter().map(f).collect::<Vec<_>>())
    }

    pub fn sse_total(&self) -> Stat {
        self.stat(|r| r.metrics().sse_total)
    }

    pub fn sse_low(&self) -> Stat {
        self.stat(|r| r.metrics().sse_low)
    }

    pub fn sse_high(&self) -> Stat {
        self.stat(|r| r.metrics().sse_high)
    }

    pub fn wall_ms(&self) -> f64 {
        self.runs.iter().map(|r| r.timing.total_ms).sum()
    }

    pub fn summary(&self, axis: Axis) -> PointSummary {
        PointSummary {
            axis,
            value: self.value,
            sse_total: self.sse_total(),
            sse_low: self.sse_low(),
            sse_high: self.sse_high(),
            mse_total: self.stat(|r| r.metrics().mse_total),
            trials: self.runs.iter().map(|r| r.summary.clone()).collect(),
        }
    }
}

/// Runs `trials` seeded trials per axis value; trial `i` uses
/// [`ExperimentConfig::trial_seed`]`(i)`.
pub fn sweep(
    template: &ExperimentConfig,
    axis: Axis,
    values: &[f64],
    trials: usize,
) -> Result<Vec<SweepPoint>> {
    if values.is_empty() {
        return Err(Error::parameter("sweep needs at least one axis value"));
    }
    if trials == 0 {
        return Err(Error::parameter("sweep needs at least one trial"));
    }
    let configs = values
        .iter()
        .map(|&v| axis.apply(template, v))
        .collect::<Result<Vec<_>>>()?;
    let jobs: Vec<(usize, usize)> = (0..values.len())
        .flat_map(|p| (0..trials).map(move |t| (p, t)))
        .collect();
    let mut runs = jobs
        .par_iter()
        .map(|&(p, t)| run_protocol(&configs[p].with_seed(configs[p].trial_seed(t))))
        .collect::<Result<Vec<_>>>()?
        .into_iter();
    Ok(values
        .iter()
        .zip(configs)
        .map(|(&value, config)| SweepPoint {
            value,
            config,
            runs: runs.by_ref().take(trials).collect(),
        })
        .collect())
}

fn value_dir_name(axis: Axis, value: f64) -> String {
    format!("{axis}={value}")
}

/// Writes one directory per axis value (`summary.json`, `config.toml`)
/// and a top-level `index.csv`.
pub fn write_sweep(dir: &Path, axis: Axis, points: &[SweepPoint]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let index_path = dir.join("index.csv");
    let mut index = csv::Writer::from_path(&index_path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(&index_path, io),
        other => Error::contract(format!("{other:?}")),
    })?;
    let row_err = |e: csv::Error| Error::io(&index_path, std::io::Error::other(e));
    index
        .write_record([
            axis.as_str(),
            "sse_total",
            "sse_low",
            "sse_high",
            "sse_total_std",
            "sse_low_std",
            "sse_high_std",
            "trials",
            "wall_ms",
        ])
        .map_err(row_err)?;
    for point in points {
        let sub = dir.join(value_dir_name(axis, point.value));
        std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        let summary = serde_json::to_string_pretty(&point.summary(axis)).expect("summary serializes");
        let path = sub.join("summary.json");
        std::fs::write(&path, summary).map_err(|e| Error::io(&path, e))?;
        let path = sub.join("config.toml");
        std::fs::write(&path, point.config.to_toml()).map_err(|e| Error::io(&path, e))?;
        let (total, low, high) = (point.sse_total(), point.sse_low(), point.sse_high());
        index
            .write_record([
                point.value.to_string(),
                total.mean.to_string(),
                low.mean.to_string(),
                high.mean.to_string(),
                total.std.to_string(),
                low.std.to_string(),
                high.std.to_string(),
                point.runs.len().to_string(),
                format!("{:.3}", point.wall_ms()),
            ])
            .map_err(row_err)?;
    }
    index.flush().map_err(|e| Error::io(&index_path, e))
}
