use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{tags, ExperimentConfig, Mechanism};
use super::dataset::Dataset;
use super::metrics::{true_boundary, ItemEstimate, Metrics};
use crate::client::{client_report, derive_privacy, ClientRng, Encoding, Phase};
use crate::error::{Error, Result};
use crate::hashing::{derive_seed, HashFamily, ItemKey};
use crate::model::{
    build_training_set, compute_boundary, fit, Boundary, FrequencyModel, FrequencyOracle,
    SketchParams,
};
use crate::server::{estimate_cms, Branch, ServerState};
use crate::sketch::AggregateSketch;

/// Clients per simulation shard. Fixed so that shard boundaries, and hence
/// results, do not depend on the thread count.
pub const SHARD_SIZE: usize = 4096;

#[derive(Debug, Clone)]
pub struct Simulation {
    pub sketch: AggregateSketch,
    pub one_hot: u64,
    pub dummy: u64,
}

/// Simulates the clients `clients` (indices into `records`) reporting in
/// `phase` and aggregates their reports into an empty copy of `template`.
/// Client `i` draws from `ClientRng::new(client_seed, i)`.
pub fn simulate_clients(
    records: &[ItemKey],
    clients: &[usize],
    phase: Phase,
    model: Option<&dyn FrequencyOracle>,
    template: &AggregateSketch,
    client_seed: u64,
) -> Result<Simulation> {
    let params = *template.params();
    let family = template.family();
    let shards = clients
        .par_chunks(SHARD_SIZE)
        .map(|chunk| {
            let mut shard = Simulation {
                sketch: template.empty_like(),
                one_hot: 0,
                dummy: 0,
            };
            for &i in chunk {
                let d = *records.get(i).ok_or_else(|| {
                    Error::contract(format!("client index {i} outside the population"))
                })?;
                let mut rng = ClientRng::new(client_seed, i as u64);
                let out = client_report(d, phase, model, &params, family, &mut rng)?;
                shard.sketch.absorb(&out.report)?;
                match out.encoding {
                    Encoding::OneHot => shard.one_hot += 1,
                    Encoding::Dummy => shard.dummy += 1,
                }
            }
            Ok(shard)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = Simulation {
        sketch: template.empty_like(),
        one_hot: 0,
        dummy: 0,
    };
    for shard in &shards {
        total.sketch.merge_from(&shard.sketch)?;
        total.one_hot += shard.one_hot;
        total.dummy += shard.dummy;
    }
    Ok(total)
}

/// A frequency oracle that knows the true counts; its boundary is the
/// `θ`-prefix rule applied to them.
#[derive(Debug, Clone)]
pub struct TruthOracle {
    counts: Vec<f64>,
    boundary: Boundary,
}

impl TruthOracle {
    pub fn new(counts: &[u64], theta: f64) -> Result<Self> {
        Ok(Self {
            counts: counts.iter().map(|&c| c as f64).collect(),
            boundary: true_boundary(counts, theta)?,
        })
    }
}

impl FrequencyOracle for TruthOracle {
    fn predict(&self, d: ItemKey) -> f64 {
        self.counts.get(d.0 as usize).copied().unwrap_or(0.0)
    }

    fn boundary(&self) -> Option<Boundary> {
        Some(self.boundary)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config: ExperimentConfig,
    pub n: u64,
    pub domain_size: u64,
    pub phase1_clients: u64,
    pub phase2_clients: u64,
    /// Reports absorbed into the phase-one sketch.
    pub phase1_absorbed: u64,
    /// Reports absorbed into the final sketch.
    pub phase2_absorbed: u64,
    pub one_hot_reports: u64,
    pub dummy_reports: u64,
    pub boundary: Option<Boundary>,
    pub true_boundary: Boundary,
    pub training_items: u64,
    pub model_trees: u64,
    pub model_bytes: u64,
    pub sketch_bytes: u64,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub dataset_ms: f64,
    pub phase1_ms: f64,
    pub training_ms: f64,
    pub phase2_ms: f64,
    pub estimation_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub summary: RunSummary,
    pub items: Vec<ItemEstimate>,
    pub timing: Timing,
    pub sketch: AggregateSketch,
    pub model: Option<FrequencyModel>,
}

impl RunResult {
    pub fn metrics(&self) -> &Metrics {
        &self.summary.metrics
    }

    /// Deterministic JSON summary; excludes timing.
    pub fn summary_json(&self) -> String {
        serde_json::to_string_pretty(&self.summary).expect("summary serializes")
    }

    pub fn timing_json(&self) -> String {
        serde_json::to_string_pretty(&self.timing).expect("timing serializes")
    }

    /// Writes `item,true_count,estimate,branch` rows; `clamp` replaces
    /// negative estimates by zero in the output only.
    pub fn write_items_csv<W: Write>(&self, out: W, clamp: bool) -> std::io::Result<()> {
        write_items_csv(out, &self.items, clamp)
    }
}

pub fn write_items_csv<W: Write>(out: W, items: &[ItemEstimate], clamp: bool) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["item", "true_count", "estimate", "branch"])?;
    for it in items {
        let estimate = if clamp { it.estimate.max(0.0) } else { it.estimate };
        w.write_record([
            it.item.to_string(),
            it.true_count.to_string(),
            estimate.to_string(),
            it.branch.as_str().to_string(),
        ])?;
    }
    w.flush()
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Loads the configured dataset and runs the configured mechanism.
pub fn run_protocol(cfg: &ExperimentConfig) -> Result<RunResult> {
    cfg.validate()?;
    let start = Instant::now();
    let dataset = cfg.dataset.load(cfg.seed)?;
    let dataset_ms = ms_since(start);
    let mut result = run_on(cfg, &dataset)?;
    result.timing.dataset_ms = dataset_ms;
    result.timing.total_ms += dataset_ms;
    Ok(result)
}

/// Runs the configured mechanism on an already loaded dataset.
pub fn run_on(cfg: &ExperimentConfig, dataset: &Dataset) -> Result<RunResult> {
    cfg.validate()?;
    if dataset.n() == 0 {
        return Err(Error::parameter("dataset has no records"));
    }
    match cfg.mechanism {
        Mechanism::Ldplcm => run_ldplcm(cfg, dataset),
        Mechanism::AppleCms => run_apple_cms(cfg, dataset),
    }
}

fn empty_sketch(cfg: &ExperimentConfig) -> Result<AggregateSketch> {
    let family = HashFamily::new(cfg.k, cfg.m, derive_seed(cfg.seed, tags::HASH, 0))?;
    AggregateSketch::new(family, derive_privacy(cfg.epsilon)?)
}

/// Splits `0..n` into a uniform sample of `⌊r n⌋` clients and the rest.
pub fn partition_clients(n: usize, r: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let n1 = (r * n as f64).floor() as usize;
    if n1 == 0 {
        return Err(Error::parameter(format!("phase-one population is empty (r = {r}, n = {n})")));
    }
    if n1 >= n {
        return Err(Error::parameter(format!("phase-two population is empty (r = {r}, n = {n})")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sampled = vec![false; n];
    for i in rand::seq::index::sample(&mut rng, n, n1) {
        sampled[i] = true;
    }
    let (phase1, phase2): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| sampled[i]);
    Ok((phase1, phase2))
}

fn run_ldplcm(cfg: &ExperimentConfig, dataset: &Dataset) -> Result<RunResult> {
    let start = Instant::now();
    let records = dataset.records();
    let domain = dataset.domain_size();
    let template = empty_sketch(cfg)?;
    let (phase1, phase2) =
        partition_clients(records.len(), cfg.r, derive_seed(cfg.seed, tags::SAMPLE, 0))?;

    let mut state = ServerState::new(template.clone(), cfg.theta, cfg.r)?;
    let sim1 = simulate_clients(
        records,
        &phase1,
        Phase::One,
        None,
        &template,
        derive_seed(cfg.seed, tags::CLIENT, 1),
    )?;
    state.absorb_shard(&sim1.sketch)?;
    let phase1_absorbed = state.sketch().n();
    let phase1_ms = ms_since(start);

    let t_train = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, tags::TRAIN, 0));
    let training = build_training_set(state.sketch(), domain, cfg.t, cfg.r, &mut rng)?;
    let mut model = fit(&training, cfg.hyperparameters)?;
    model.set_sketch_params(SketchParams::of(state.sketch()));
    model.set_domain_size(domain);
    let probe: Vec<ItemKey> = training.items().collect();
    let boundary = compute_boundary(&model, &probe, cfg.theta)?;
    model.set_boundary(boundary, cfg.theta);
    let training_ms = ms_since(t_train);

    let t_phase2 = Instant::now();
    state.begin_phase_two(model.clone())?;
    let sim2 = simulate_clients(
        records,
        &phase2,
        Phase::Two,
        Some(&model),
        &template,
        derive_seed(cfg.seed, tags::CLIENT, 2),
    )?;
    state.absorb_shard(&sim2.sketch)?;
    let phase2_ms = ms_since(t_phase2);

    let t_est = Instant::now();
    let items = (0..domain)
        .into_par_iter()
        .map(|d| {
            let d = ItemKey(d);
            let e = state.estimate_ldplcm(d)?;
            Ok(ItemEstimate {
                item: d,
                true_count: dataset.true_count(d),
                estimate: e.value,
                branch: e.branch,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let truth = true_boundary(dataset.counts(), cfg.theta)?;
    let metrics = Metrics::compute(&items, truth)?;
    let estimation_ms = ms_since(t_est);

    let sketch = state.sketch().clone();
    let summary = RunSummary {
        config: cfg.clone(),
        n: records.len() as u64,
        domain_size: domain,
        phase1_clients: phase1.len() as u64,
        phase2_clients: phase2.len() as u64,
        phase1_absorbed,
        phase2_absorbed: sketch.n(),
        one_hot_reports: sim1.one_hot + sim2.one_hot,
        dummy_reports: sim2.dummy,
        boundary: Some(boundary),
        true_boundary: truth,
        training_items: training.t() as u64,
        model_trees: model.trees().len() as u64,
        model_bytes: model.serialize().len() as u64,
        sketch_bytes: sketch.to_bytes().len() as u64,
        metrics,
    };
    Ok(RunResult {
        summary,
        items,
        timing: Timing {
            dataset_ms: 0.0,
            phase1_ms,
            training_ms,
            phase2_ms,
            estimation_ms,
            total_ms: ms_since(start),
        },
        sketch,
        model: Some(model),
    })
}

/// Every client reports a perturbed one-hot vector into a single sketch.
pub fn run_apple_cms(cfg: &ExperimentConfig, dataset: &Dataset) -> Result<RunResult> {
    let start = Instant::now();
    let records = dataset.records();
    let domain = dataset.domain_size();
    let template = empty_sketch(cfg)?;
    let clients: Vec<usize> = (0..records.len()).collect();
    let sim = simulate_clients(
        records,
        &clients,
        Phase::One,
        None,
        &template,
        derive_seed(cfg.seed, tags::CLIENT, 1),
    )?;
    let phase1_ms = ms_since(start);

    let t_est = Instant::now();
    let sketch = sim.sketch;
    let items = (0..domain)
        .into_par_iter()
        .map(|d| {
            let d = ItemKey(d);
            Ok(ItemEstimate {
                item: d,
                true_count: dataset.true_count(d),
                estimate: estimate_cms(&sketch, d)?,
                branch: Branch::Sketch,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let truth = true_boundary(dataset.counts(), cfg.theta)?;
    let metrics = Metrics::compute(&items, truth)?;
    let estimation_ms = ms_since(t_est);

    let summary = RunSummary {
        config: cfg.clone(),
        n: records.len() as u64,
        domain_size: domain,
        phase1_clients: records.len() as u64,
        phase2_clients: 0,
        phase1_absorbed: sketch.n(),
        phase2_absorbed: 0,
        one_hot_reports: sim.one_hot,
        dummy_reports: 0,
        boundary: None,
        true_boundary: truth,
        training_items: 0,
        model_trees: 0,
        model_bytes: 0,
        sketch_bytes: sketch.to_bytes().len() as u64,
        metrics,
    };
    Ok(RunResult {
        summary,
        items,
        timing: Timing {
            phase1_ms,
            estimation_ms,
            total_ms: ms_since(start),
            ..Timing::default()
        },
        sketch,
        model: None,
    })
}

/// Writes the run artifacts into `dir`: `config.toml`, `summary.json`,
/// `timing.json`, `items.csv`, `sketch.bin` and, for two-phase runs,
/// `model.json`.
pub fn write_artifacts(result: &RunResult, dir: &Path, clamp: bool) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, bytes: &[u8]| {
        let path = dir.join(name);
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
    };
    write("config.toml", result.summary.config.to_toml().as_bytes())?;
    write("summary.json", result.summary_json().as_bytes())?;
    write("timing.json", result.timing_json().as_bytes())?;
    let mut items = Vec::new();
    result
        .write_items_csv(&mut items, clamp)
        .map_err(|e| Error::io(&dir.join("items.csv"), e))?;
    write("items.csv", &items)?;
    result.sketch.write_to(&dir.join("sketch.bin"))?;
    if let Some(model) = &result.model {
        model.write_to(&dir.join("model.json"))?;
    }
    Ok(())
}
