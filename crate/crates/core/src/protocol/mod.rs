//! End-to-end protocol simulation, datasets, metrics and parameter sweeps.

pub mod config;
pub mod dataset;
pub mod metrics;
pub mod run;
pub mod sweep;

pub use config::{DatasetSpec, ExperimentConfig, Mechanism};
pub use dataset::{gen_zipf, ingest_csv, Dataset, KeyOrder};
pub use metrics::{mse, sse, ItemEstimate, Metrics};
pub use run::{run_on, run_protocol, simulate_clients, RunResult, RunSummary, TruthOracle};
pub use sweep::{sweep, write_sweep, Axis, SweepPoint};
