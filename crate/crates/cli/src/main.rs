//! `ldplcm`: data generation, protocol runs, estimation and parameter sweeps.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 I/O error,
//! 4 contract error (incompatible artifacts, rejected input).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use ldplcm::protocol::config::DatasetSpec;
use ldplcm::protocol::dataset::read_key_map;
use ldplcm::protocol::run::write_artifacts;
use ldplcm::protocol::{sweep, write_sweep, Axis, ExperimentConfig, KeyOrder, Mechanism, SweepPoint};
use ldplcm::{estimate_cms, estimate_ldplcm, AggregateSketch, Error, ErrorKind, FrequencyModel, FrequencyOracle, ItemKey};

const EXIT_CONFIG: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_CONTRACT: u8 = 4;

#[derive(Parser)]
#[command(name = "ldplcm", version, about = "Locally private frequency estimation with a learned sketch")]
struct Cli {
    /// Worker threads for client simulation and sweep trials; outputs do not depend on it.
    #[arg(long, global = true, env = "LDPLCM_JOBS")]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a Zipf dataset or canonicalize a CSV file.
    GenData(GenDataArgs),
    /// Run one protocol simulation and write its artifacts.
    Run(RunArgs),
    /// Estimate item frequencies from a sketch and model.
    Estimate(EstimateArgs),
    /// Sweep one parameter for both mechanisms.
    Bench(SweepArgs),
    /// Sweep one parameter.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Number of Zipf records.
    #[arg(long, conflicts_with = "csv", required_unless_present = "csv")]
    zipf: Option<u64>,
    /// Zipf exponent.
    #[arg(long, default_value_t = 1.1)]
    s: f64,
    #[arg(long, default_value_t = ldplcm::protocol::dataset::DEFAULT_MAX_RANK)]
    max_rank: u64,
    /// Input file of tokens or token,count lines.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Key tokens by ascending numeric value instead of first appearance.
    #[arg(long)]
    numeric_keys: bool,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, env = "LDPLCM_OUT", default_value = "data")]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct Overrides {
    /// Config file (TOML, or JSON by extension); defaults to the desk-scale Zipf setup.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_mechanism)]
    mechanism: Option<Mechanism>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    /// Phase-one sampling rate.
    #[arg(long)]
    r: Option<f64>,
    #[arg(long)]
    theta: Option<f64>,
    /// Training sample size (clamped to the domain).
    #[arg(long)]
    t: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    n_estimators: Option<usize>,
    #[arg(long)]
    max_depth: Option<usize>,
    /// Use a Zipf dataset of this many records.
    #[arg(long, conflicts_with = "data")]
    zipf: Option<u64>,
    /// Zipf exponent for the configured or `--zipf` dataset.
    #[arg(long)]
    s: Option<f64>,
    /// Use this CSV file as dataset.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, requires = "data")]
    numeric_keys: bool,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    overrides: Overrides,
    #[arg(long, env = "LDPLCM_OUT", default_value = "out")]
    out: PathBuf,
    /// Report negative estimates as zero in items.csv.
    #[arg(long)]
    clamp_nonnegative: bool,
}

#[derive(Args)]
struct EstimateArgs {
    #[arg(long)]
    sketch: PathBuf,
    /// Model file; without it estimates come from the sketch alone.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Comma-separated item keys.
    #[arg(long, value_delimiter = ',', conflicts_with = "all", required_unless_present = "all")]
    items: Vec<u64>,
    /// Estimate every key of the domain.
    #[arg(long)]
    all: bool,
    /// Domain size for `--all` when the model does not record it.
    #[arg(long)]
    domain_size: Option<u64>,
    /// Key map written by gen-data; adds a token column.
    #[arg(long)]
    keys: Option<PathBuf>,
    /// Expected sketch width; refuse the sketch if it differs.
    #[arg(long)]
    m: Option<usize>,
    /// Expected sketch depth.
    #[arg(long)]
    k: Option<usize>,
    /// Expected privacy budget.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Expected hash seed.
    #[arg(long)]
    hash_seed: Option<u64>,
    /// Output file; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    clamp_nonnegative: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    overrides: Overrides,
    #[arg(long, value_parser = parse_axis)]
    axis: Axis,
    /// Comma-separated values, or an integer range `a..b` (inclusive).
    #[arg(long, allow_hyphen_values = true)]
    values: String,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long, env = "LDPLCM_OUT", default_value = "sweep")]
    out: PathBuf,
}

fn parse_mechanism(s: &str) -> std::result::Result<Mechanism, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_axis(s: &str) -> std::result::Result<Axis, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn config_error(msg: impl Into<String>) -> anyhow::Error {
    Error::Parameter(msg.into()).into()
}

fn parse_values(text: &str) -> Result<Vec<f64>> {
    let text = text.trim();
    if let Some((a, b)) = text.split_once("..") {
        let (a, b): (i64, i64) = (
            a.trim().parse().map_err(|_| config_error(format!("invalid range start {a:?}")))?,
            b.trim().parse().map_err(|_| config_error(format!("invalid range end {b:?}")))?,
        );
        if a > b {
            return Err(config_error(format!("empty range {text}")));
        }
        return Ok((a..=b).map(|v| v as f64).collect());
    }
    let values = text
        .split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(|v| v.parse::<f64>().map_err(|_| config_error(format!("invalid value {v:?}"))))
        .collect::<Result<Vec<_>>>()?;
    if values.is_empty() {
        return Err(config_error("--values must list at least one value"));
    }
    Ok(values)
}

impl Overrides {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::from_path(path)?,
            None => ExperimentConfig::default(),
        };
        macro_rules! set {
            ($($field:ident => $target:expr),* $(,)?) => {
                $(if let Some(v) = self.$field { $target = v; })*
            };
        }
        set!(
            mechanism => cfg.mechanism,
            epsilon => cfg.epsilon,
            m => cfg.m,
            k => cfg.k,
            r => cfg.r,
            theta => cfg.theta,
            t => cfg.t,
            seed => cfg.seed,
            learning_rate => cfg.hyperparameters.learning_rate,
            n_estimators => cfg.hyperparameters.n_estimators,
            max_depth => cfg.hyperparameters.max_depth,
        );
        if let Some(n) = self.zipf {
            let (s, max_rank) = match cfg.dataset {
                DatasetSpec::Zipf { s, max_rank, .. } => (s, max_rank),
                DatasetSpec::Csv { .. } => (1.1, ldplcm::protocol::dataset::DEFAULT_MAX_RANK),
            };
            cfg.dataset = DatasetSpec::Zipf { n, s, max_rank, seed: None };
        }
        if let Some(path) = &self.data {
            cfg.dataset = DatasetSpec::Csv {
                path: path.clone(),
                order: if self.numeric_keys { KeyOrder::Numeric } else { KeyOrder::FirstSeen },
            };
        }
        if let Some(new_s) = self.s {
            match &mut cfg.dataset {
                DatasetSpec::Zipf { s, .. } => *s = new_s,
                DatasetSpec::Csv { .. } => return Err(config_error("--s applies to zipf datasets only")),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.into(), source: e }.into())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::Io { path: path.into(), source: e }.into())
}

fn gen_data(args: &GenDataArgs) -> Result<()> {
    let (spec, dataset) = match (&args.csv, args.zipf) {
        (Some(path), _) => {
            let order = if args.numeric_keys { KeyOrder::Numeric } else { KeyOrder::FirstSeen };
            let spec = DatasetSpec::Csv { path: path.clone(), order };
            let ds = spec.load(args.seed)?;
            (spec, ds)
        }
        (None, Some(n)) => {
            let spec = DatasetSpec::Zipf { n, s: args.s, max_rank: args.max_rank, seed: Some(args.seed) };
            let ds = spec.load(args.seed)?;
            (spec, ds)
        }
        (None, None) => return Err(config_error("one of --zipf or --csv is required")),
    };
    create_dir(&args.out)?;
    dataset.write_records(&args.out.join("records.txt"))?;
    dataset.write_counts(&args.out.join("counts.csv"))?;
    dataset.write_key_map(&args.out.join("keys.csv"))?;
    let meta = serde_json::json!({
        "dataset": spec,
        "n": dataset.n(),
        "domain_size": dataset.domain_size(),
    });
    write_file(&args.out.join("dataset.json"), serde_json::to_string_pretty(&meta)?.as_bytes())?;
    println!("records: {}", dataset.n());
    println!("domain size: {}", dataset.domain_size());
    Ok(())
}

fn run(args: &RunArgs) -> Result<()> {
    let cfg = args.overrides.resolve()?;
    eprintln!("resolved config:\n{}", cfg.to_toml());
    let result = ldplcm::protocol::run_protocol(&cfg)?;
    write_artifacts(&result, &args.out, args.clamp_nonnegative)?;
    let m = result.metrics();
    println!(
        "{}: domain {} SSE_total {:.6e} SSE_low {:.6e} SSE_high {:.6e} MSE {:.6e}",
        args.out.display(),
        result.summary.domain_size,
        m.sse_total,
        m.sse_low,
        m.sse_high,
        m.mse_total
    );
    Ok(())
}

fn check_expected<T: PartialEq + std::fmt::Display>(what: &str, expected: Option<T>, actual: T) -> Result<()> {
    match expected {
        Some(e) if e != actual => Err(Error::Mismatch(format!("sketch has {what} = {actual}, expected {e}")).into()),
        _ => Ok(()),
    }
}

fn estimate(args: &EstimateArgs) -> Result<()> {
    let sketch = AggregateSketch::read_from(&args.sketch)?;
    check_expected("m", args.m, sketch.m())?;
    check_expected("k", args.k, sketch.k())?;
    check_expected("epsilon", args.epsilon, sketch.params().epsilon())?;
    check_expected("hash seed", args.hash_seed, sketch.family().master_seed())?;
    let model = args.model.as_deref().map(FrequencyModel::read_from).transpose()?;
    if let Some(model) = &model {
        let params = model
            .sketch_params()
            .ok_or_else(|| Error::Mismatch("model does not record its sketch parameters".into()))?;
        check_expected("m", Some(params.m), sketch.m())?;
        check_expected("k", Some(params.k), sketch.k())?;
        check_expected("epsilon", Some(params.epsilon), sketch.params().epsilon())?;
        check_expected("hash seed", Some(params.master_seed), sketch.family().master_seed())?;
        if model.boundary().is_none() {
            return Err(Error::Mismatch("model has no frequency boundary".into()).into());
        }
        if let (Some(a), Some(b)) = (model.theta(), sketch.theta()) {
            if a.to_bits() != b.to_bits() {
                return Err(Error::Mismatch(format!("model theta {a} differs from sketch theta {b}")).into());
            }
        }
    }
    let items: Vec<u64> = if args.all {
        let d = args
            .domain_size
            .or_else(|| model.as_ref().and_then(FrequencyModel::domain_size))
            .ok_or_else(|| config_error("--all needs --domain-size when the model does not record it"))?;
        (0..d).collect()
    } else {
        args.items.clone()
    };
    let tokens = args.keys.as_deref().map(read_key_map).transpose()?;

    let mut rows = Vec::with_capacity(items.len());
    for &d in &items {
        let d = ItemKey(d);
        let (value, branch) = match &model {
            Some(model) => {
                let theta = model.theta().unwrap_or(0.0);
                let e = estimate_ldplcm(&sketch, model, theta, d)?;
                (e.value, e.branch.as_str())
            }
            None => (estimate_cms(&sketch, d)?, "sketch"),
        };
        let value = if args.clamp_nonnegative { value.max(0.0) } else { value };
        rows.push((d, value, branch));
    }

    let mut buf = Vec::new();
    let header = if tokens.is_some() { "item,token,estimate,branch" } else { "item,estimate,branch" };
    writeln!(buf, "{header}")?;
    for (d, value, branch) in rows {
        match &tokens {
            Some(t) => {
                let token = t.get(d.0 as usize).map(String::as_str).unwrap_or("");
                writeln!(buf, "{d},{},{value},{branch}", csv_field(token))?
            }
            None => writeln!(buf, "{d},{value},{branch}")?,
        }
    }
    match &args.out {
        Some(path) => write_file(path, &buf),
        None => std::io::stdout().write_all(&buf).context("writing standard output"),
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn run_sweep(args: &SweepArgs, mechanisms: &[Mechanism]) -> Result<Vec<(Mechanism, Vec<SweepPoint>)>> {
    let values = parse_values(&args.values)?;
    let base = args.overrides.resolve()?;
    let trials = args.trials.unwrap_or(base.trials);
    let mut out = Vec::new();
    for &mechanism in mechanisms {
        let cfg = ExperimentConfig { mechanism, trials, ..base.clone() };
        eprintln!("resolved config:\n{}", cfg.to_toml());
        out.push((mechanism, sweep(&cfg, args.axis, &values, trials)?));
    }
    Ok(out)
}

fn print_points(axis: Axis, label: &str, points: &[SweepPoint]) {
    for p in points {
        let (t, l, h) = (p.sse_total(), p.sse_low(), p.sse_high());
        println!(
            "{label}{axis}={}: SSE_total {:.6e} (sd {:.3e}) SSE_low {:.6e} SSE_high {:.6e}",
            p.value, t.mean, t.std, l.mean, h.mean
        );
    }
}

fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    let base = args.overrides.resolve()?;
    let [(_, points)]: [_; 1] = run_sweep(args, &[base.mechanism])?.try_into().expect("one mechanism");
    write_sweep(&args.out, args.axis, &points)?;
    print_points(args.axis, "", &points);
    Ok(())
}

fn cmd_bench(args: &SweepArgs) -> Result<()> {
    let results = run_sweep(args, &[Mechanism::Ldplcm, Mechanism::AppleCms])?;
    create_dir(&args.out)?;
    let mut index = format!("{},mechanism,sse_total,sse_low,sse_high,sse_total_std,trials\n", args.axis);
    for (mechanism, points) in &results {
        let name = match mechanism {
            Mechanism::Ldplcm => "ldplcm",
            Mechanism::AppleCms => "apple-cms",
        };
        write_sweep(&args.out.join(name), args.axis, points)?;
        print_points(args.axis, &format!("{name} "), points);
        for p in points {
            let t = p.sse_total();
            index.push_str(&format!(
                "{},{name},{},{},{},{},{}\n",
                p.value,
                t.mean,
                p.sse_low().mean,
                p.sse_high().mean,
                t.std,
                p.runs.len()
            ));
        }
    }
    write_file(&args.out.join("index.csv"), index.as_bytes())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e.kind() {
                ErrorKind::Config => EXIT_CONFIG,
                ErrorKind::Io => EXIT_IO,
                ErrorKind::Contract => EXIT_CONTRACT,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return EXIT_IO;
        }
    }
    EXIT_CONTRACT
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            eprintln!("error: --jobs must be at least 1");
            return ExitCode::from(EXIT_CONFIG);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            log::warn!("could not size the worker pool: {e}");
        }
    }
    let result = match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Run(a) => run(a),
        Command::Estimate(a) => estimate(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Sweep(a) => cmd_sweep(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
