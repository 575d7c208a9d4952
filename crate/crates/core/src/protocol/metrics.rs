use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hashing::ItemKey;
use crate::model::{boundary_from_predictions, Boundary};
use crate::server::Branch;

/// `Σ (f − f̂)²` over aligned vectors.
pub fn sse(truth: &[f64], estimates: &[f64]) -> Result<f64> {
    if truth.len() != estimates.len() {
        return Err(Error::contract(format!(
            "misaligned item sets: {} true values, {} estimates",
            truth.len(),
            estimates.len()
        )));
    }
    Ok(truth
        .iter()
        .zip(estimates)
        .map(|(f, e)| (f - e) * (f - e))
        .sum())
}

/// SSE divided by the domain size `d`.
pub fn mse(truth: &[f64], estimates: &[f64], d: u64) -> Result<f64> {
    if d == 0 {
        return Err(Error::parameter("domain size must be positive"));
    }
    Ok(sse(truth, estimates)? / d as f64)
}

/// Ground-truth high-frequent set: items whose true count reaches the
/// boundary the `θ`-prefix rule yields on true counts.
pub fn true_boundary(counts: &[u64], theta: f64) -> Result<Boundary> {
    let pairs: Vec<(ItemKey, f64)> = counts
        .iter()
        .enumerate()
        .map(|(d, &c)| (ItemKey(d as u64), c as f64))
        .collect();
    boundary_from_predictions(&pairs, theta)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ItemEstimate {
    pub item: ItemKey,
    pub true_count: u64,
    pub estimate: f64,
    pub branch: Branch,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub sse_total: f64,
    pub mse_total: f64,
    /// SSE over items that are high-frequent by true counts.
    pub sse_high: f64,
    /// SSE over items that are low-frequent by true counts.
    pub sse_low: f64,
    /// SSE over items answered by the model.
    pub sse_model_branch: f64,
    /// SSE over items answered by the sketch.
    pub sse_sketch_branch: f64,
    pub high_items: u64,
    pub low_items: u64,
    pub model_branch_items: u64,
}

impl Metrics {
    pub fn compute(items: &[ItemEstimate], true_boundary: Boundary) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::parameter("no items to score"));
        }
        let mut m = Metrics {
            sse_total: 0.0,
            mse_total: 0.0,
            sse_high: 0.0,
            sse_low: 0.0,
            sse_model_branch: 0.0,
            sse_sketch_branch: 0.0,
            high_items: 0,
            low_items: 0,
            model_branch_items: 0,
        };
        for it in items {
            let e = it.true_count as f64 - it.estimate;
            let sq = e * e;
            m.sse_total += sq;
            if true_boundary.is_high(it.true_count as f64) {
                m.sse_high += sq;
                m.high_items += 1;
            } else {
                m.sse_low += sq;
                m.low_items += 1;
            }
            match it.branch {
                Branch::Model => {
                    m.sse_model_branch += sq;
                    m.model_branch_items += 1;
                }
                Branch::Sketch => m.sse_sketch_branch += sq,
            }
        }
        m.mse_total = m.sse_total / items.len() as f64;
        Ok(m)
    }
}
