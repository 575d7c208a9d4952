//! Server-side aggregation and frequency estimation.

use serde::{Deserialize, Serialize};

use crate::client::{Phase, PrivacyParams, Report};
use crate::error::{Error, Result};
use crate::hashing::ItemKey;
use crate::model::{Classification, FrequencyModel, FrequencyOracle};
use crate::sketch::AggregateSketch;

/// Debiased sketch estimate with the high-frequent mass `θ` removed:
/// `m/(m−1) · ((1/k) Σ_l M[l, h_l(d)] − (1−θ) n/m)`.
fn sketch_estimate(sketch: &AggregateSketch, d: ItemKey, theta: f64) -> f64 {
    let m = sketch.m() as f64;
    let k = sketch.k() as f64;
    let n = sketch.n() as f64;
    m / (m - 1.0) * (sketch.hashed_sum(d) / k - (1.0 - theta) * n / m)
}

/// Count-mean estimate over a sketch built from one-hot reports only.
pub fn estimate_cms(sketch: &AggregateSketch, d: ItemKey) -> Result<f64> {
    Ok(sketch_estimate(sketch, d, 0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Model,
    Sketch,
}

impl Branch {
    pub fn as_str(&self) -> &'static str {
        match self {
            Branch::Model => "model",
            Branch::Sketch => "sketch",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub branch: Branch,
}

/// Two-phase estimate: the model's prediction for high-frequent items, the
/// `θ`-corrected sketch estimate otherwise.
pub fn estimate_ldplcm(
    sketch: &AggregateSketch,
    model: &dyn FrequencyOracle,
    theta: f64,
    d: ItemKey,
) -> Result<Estimate> {
    check_theta(theta)?;
    Ok(match model.classify(d)? {
        Classification::High { prediction } => Estimate {
            value: prediction,
            branch: Branch::Model,
        },
        Classification::Low => Estimate {
            value: sketch_estimate(sketch, d, theta),
            branch: Branch::Sketch,
        },
    })
}

/// `θ`-corrected sketch estimate without consulting a model.
pub fn estimate_low(sketch: &AggregateSketch, theta: f64, d: ItemKey) -> Result<f64> {
    check_theta(theta)?;
    Ok(sketch_estimate(sketch, d, theta))
}

fn check_theta(theta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&theta) {
        return Err(Error::parameter(format!("theta must lie in [0, 1], got {theta}")));
    }
    Ok(())
}

/// Upper bound on the variance of `(1/k) Σ_l M[l, h_l(d)]` for a
/// low-frequent item `d`:
/// `n(c_ε²−1)/4 + (n(1−θ) − f(d))/m + Σ_{low} f²/(km)`.
pub fn variance_bound(
    n: f64,
    m: f64,
    k: f64,
    theta: f64,
    f_d: f64,
    sum_sq_low: f64,
    params: &PrivacyParams,
) -> f64 {
    let c = params.c_epsilon();
    n * (c * c - 1.0) / 4.0 + (n * (1.0 - theta) - f_d) / m + sum_sq_low / (k * m)
}

/// Aggregation state for one protocol phase.
#[derive(Debug, Clone)]
pub struct ServerState {
    phase: Phase,
    sketch: AggregateSketch,
    model: Option<FrequencyModel>,
    theta: f64,
    sampling_rate: f64,
    rejected: u64,
}

impl ServerState {
    pub fn new(sketch: AggregateSketch, theta: f64, sampling_rate: f64) -> Result<Self> {
        check_theta(theta)?;
        if !(sampling_rate > 0.0 && sampling_rate <= 1.0) {
            return Err(Error::parameter(format!(
                "sampling rate must lie in (0, 1], got {sampling_rate}"
            )));
        }
        Ok(Self {
            phase: Phase::One,
            sketch,
            model: None,
            theta,
            sampling_rate,
            rejected: 0,
        })
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn sketch(&self) -> &AggregateSketch {
        &self.sketch
    }

    pub fn model(&self) -> Option<&FrequencyModel> {
        self.model.as_ref()
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn sampling_rate(&self) -> f64 {
        self.sampling_rate
    }

    pub fn rejected(&self) -> u64 {
        self.rejected
    }

    /// Absorbs a report, counting it as rejected when malformed.
    pub fn absorb_report(&mut self, report: &Report) -> Result<()> {
        self.sketch.absorb(report).inspect_err(|_| self.rejected += 1)
    }

    /// Adds a separately aggregated shard of the current phase.
    pub fn absorb_shard(&mut self, shard: &AggregateSketch) -> Result<()> {
        self.sketch.merge_from(shard)
    }

    /// Publishes the model and reinitializes the sketch for phase two.
    pub fn begin_phase_two(&mut self, model: FrequencyModel) -> Result<()> {
        if model.boundary().is_none() {
            return Err(Error::contract("phase two needs a model with its boundary set"));
        }
        self.model = Some(model);
        self.sketch = self.sketch.empty_like();
        self.sketch.set_theta(Some(self.theta));
        self.phase = Phase::Two;
        Ok(())
    }

    pub fn estimate_cms(&self, d: ItemKey) -> Result<f64> {
        estimate_cms(&self.sketch, d)
    }

    pub fn estimate_ldplcm(&self, d: ItemKey) -> Result<Estimate> {
        if self.phase != Phase::Two {
            return Err(Error::contract("two-phase estimation requires the phase-two sketch"));
        }
        let model = self
            .model
            .as_ref()
            .ok_or_else(|| Error::contract("two-phase estimation requires a frequency model"))?;
        estimate_ldplcm(&self.sketch, model, self.theta, d)
    }
}
