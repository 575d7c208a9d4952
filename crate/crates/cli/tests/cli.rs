use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ldplcm(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ldplcm"))
        .args(args)
        .current_dir(cwd)
        .env_remove("LDPLCM_OUT")
        .env_remove("LDPLCM_JOBS")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> Output {
    let out = ldplcm(args, cwd);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

const SMALL: &[&str] = &["--zipf", "5000", "--t", "100000", "--m", "64", "--k", "8"];

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        ok(&["gen-data", "--zipf", "3000", "--seed", "7", "--out", out], dir.path());
    }
    for file in ["records.txt", "counts.csv", "keys.csv", "dataset.json"] {
        let a = fs::read(dir.path().join("a").join(file)).unwrap();
        let b = fs::read(dir.path().join("b").join(file)).unwrap();
        assert_eq!(a, b, "{file}");
    }
    let records = fs::read_to_string(dir.path().join("a/records.txt")).unwrap();
    assert_eq!(records.lines().count(), 3000);
}

#[test]
fn run_output_independent_of_jobs() {
    let dir = tempfile::tempdir().unwrap();
    for (jobs, out) in [("1", "j1"), ("8", "j8")] {
        let mut args = vec!["--jobs", jobs, "run", "--out", out, "--seed", "11"];
        args.extend_from_slice(SMALL);
        ok(&args, dir.path());
    }
    for file in ["summary.json", "items.csv", "sketch.bin", "model.json", "config.toml"] {
        let a = fs::read(dir.path().join("j1").join(file)).unwrap();
        let b = fs::read(dir.path().join("j8").join(file)).unwrap();
        assert_eq!(a, b, "{file}");
    }
}

#[test]
fn estimate_checks_parameters_and_covers_domain() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["run", "--out", "r"];
    args.extend_from_slice(SMALL);
    ok(&args, dir.path());

    let bad = ldplcm(
        &["estimate", "--sketch", "r/sketch.bin", "--model", "r/model.json", "--items", "0", "--m", "32"],
        dir.path(),
    );
    assert_eq!(bad.status.code(), Some(4));

    let all = ok(&["estimate", "--sketch", "r/sketch.bin", "--model", "r/model.json", "--all"], dir.path());
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("r/summary.json")).unwrap()).unwrap();
    let domain = summary["domain_size"].as_u64().unwrap();
    let text = String::from_utf8(all.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("item,estimate,branch"));
    assert_eq!(lines.count() as u64, domain);

    let sketch_only = ok(&["estimate", "--sketch", "r/sketch.bin", "--items", "0,1"], dir.path());
    assert_eq!(String::from_utf8(sketch_only.stdout).unwrap().lines().count(), 3);
}

#[test]
fn sweep_writes_index() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["sweep", "--axis", "epsilon", "--values", "1,2,4,8", "--trials", "1", "--out", "s"];
    args.extend_from_slice(SMALL);
    ok(&args, dir.path());
    let index = fs::read_to_string(dir.path().join("s/index.csv")).unwrap();
    assert_eq!(index.lines().count(), 5);
    assert!(dir.path().join("s/epsilon=4/summary.json").exists());
}

#[test]
fn bench_compares_mechanisms() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["bench", "--axis", "m", "--values", "64", "--trials", "1", "--out", "b"];
    args.extend_from_slice(&SMALL[..4]);
    ok(&args, dir.path());
    let index = fs::read_to_string(dir.path().join("b/index.csv")).unwrap();
    assert_eq!(index.lines().count(), 3);
    assert!(index.contains(",ldplcm,") && index.contains(",apple-cms,"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let empty = ldplcm(&["sweep", "--axis", "m", "--values", ""], dir.path());
    assert_eq!(empty.status.code(), Some(2));
    let bad_r = ldplcm(&["run", "--r", "1.5"], dir.path());
    assert_eq!(bad_r.status.code(), Some(2));
    let usage = ldplcm(&["run", "--no-such-flag"], dir.path());
    assert_eq!(usage.status.code(), Some(2));
    let missing = ldplcm(&["run", "--config", "missing.toml"], dir.path());
    assert_eq!(missing.status.code(), Some(3));
    let missing_sketch = ldplcm(&["estimate", "--sketch", "none.bin", "--items", "0"], dir.path());
    assert_eq!(missing_sketch.status.code(), Some(3));
}

#[test]
fn headline_flags_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let args = [
        "run", "--out", "h", "--zipf", "4000", "--epsilon", "2", "--m", "32", "--k", "4", "--r", "0.2",
        "--theta", "0.7", "--t", "1000", "--seed", "5", "--mechanism", "ldplcm", "--learning-rate", "0.1",
        "--n-estimators", "20", "--max-depth", "3", "--s", "1.3", "--clamp-nonnegative",
    ];
    ok(&args, dir.path());
    let config = fs::read_to_string(dir.path().join("h/config.toml")).unwrap();
    assert!(config.contains("theta = 0.7"), "{config}");
    assert!(config.contains("s = 1.3"), "{config}");
    let items = fs::read_to_string(dir.path().join("h/items.csv")).unwrap();
    for line in items.lines().skip(1) {
        let est: f64 = line.split(',').nth(2).unwrap().parse().unwrap();
        assert!(est >= 0.0);
    }
}

#[test]
fn csv_round_trip_through_gen_data() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("in.csv"), "apple,5\nbanana\napple\ncherry,2\n").unwrap();
    let out = ok(&["gen-data", "--csv", "in.csv", "--out", "d"], dir.path());
    assert!(String::from_utf8(out.stdout).unwrap().contains("domain size: 3"));
    let counts = fs::read_to_string(dir.path().join("d/counts.csv")).unwrap();
    assert!(counts.contains("0,apple,6"), "{counts}");
}
