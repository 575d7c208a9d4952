//! Acceptance criteria. Runs as a plain binary so that every criterion
//! prints its own PASS/FAIL line; exits nonzero if any criterion fails.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use ldplcm::client::{client_report, encode_high, encode_low, perturb, ClientRng, Phase};
use ldplcm::hashing::derive_seed;
use ldplcm::model::{fit, TrainingSet};
use ldplcm::protocol::{gen_zipf, run_on, run_protocol, simulate_clients, sweep, Axis, TruthOracle};
use ldplcm::protocol::{ExperimentConfig, Mechanism};
use ldplcm::server::{estimate_low, variance_bound};
use ldplcm::{
    derive_privacy, estimate_cms, estimate_ldplcm, AggregateSketch, Boundary, CountMinSketch,
    FrequencyModel, FrequencyOracle, HashFamily, Hyperparams, ItemKey, Report, SignVector,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn check(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

/// Criterion-6 configuration; the model is trained on the whole realized domain.
fn desk_config() -> ExperimentConfig {
    ExperimentConfig {
        t: 100_000,
        trials: 10,
        ..ExperimentConfig::default()
    }
}

fn c1_privacy_ratio() -> Outcome {
    let (m, k, eps) = (4usize, 2usize, 2.0f64);
    let params = derive_privacy(eps).unwrap();
    let family = HashFamily::new(k, m, 17).unwrap();
    let p = 1.0 / ((eps / 2.0).exp() + 1.0);
    let mut worst: f64 = 0.0;
    let mut max_err: f64 = 0.0;
    let mut mass_err: f64 = 0.0;
    for j in 0..k {
        let high = encode_high(m).unwrap();
        let low = encode_low(ItemKey(5), &family, j).unwrap();
        let (mut sum_high, mut sum_low) = (0.0, 0.0);
        for bits in 0u32..1 << m {
            let signs: Vec<i8> = (0..m).map(|i| if bits >> i & 1 == 1 { 1 } else { -1 }).collect();
            let out = SignVector::from_signs(&signs).unwrap();
            // independent product over bits
            let closed = |input: &SignVector| -> f64 {
                (0..m)
                    .map(|i| if input.get(i) == signs[i] { 1.0 - p } else { p })
                    .product()
            };
            let (ph, pl) = (params.perturbation_probability(&high, &out), params.perturbation_probability(&low, &out));
            max_err = max_err.max((ph - closed(&high)).abs()).max((pl - closed(&low)).abs());
            sum_high += ph;
            sum_low += pl;
            worst = worst.max(ph / pl).max(pl / ph);
        }
        mass_err = mass_err.max((sum_high - 1.0).abs()).max((sum_low - 1.0).abs());
    }
    let target = (eps / 2.0).exp();
    check(
        (worst - target).abs() <= 1e-9 && worst < eps.exp() && max_err <= 1e-15 && mass_err <= 1e-12,
        format!("max ratio {worst:.12} vs e^(eps/2) {target:.12}; e^eps = {:.6}", eps.exp()),
    )
}

struct TrialStats {
    low_items: Vec<ItemKey>,
    truth: Vec<f64>,
    estimates: Vec<Vec<f64>>,
    raw: Vec<Vec<f64>>,
    bound: Vec<f64>,
    exact: Vec<f64>,
}

fn unbiasedness_trials() -> TrialStats {
    let (n, m, k, eps, theta, trials) = (10_000u64, 32usize, 8usize, 4.0, 0.5, 200usize);
    let ds = gen_zipf(n, 1.1, 64, 2024).unwrap();
    assert_eq!(ds.domain_size(), 64, "all 64 ranks realized");
    let oracle = TruthOracle::new(ds.counts(), theta).unwrap();
    let params = derive_privacy(eps).unwrap();
    let low_items: Vec<ItemKey> = ds
        .items()
        .filter(|&d| !oracle.boundary().unwrap().is_high(oracle.predict(d)))
        .collect();
    let clients: Vec<usize> = (0..ds.n()).collect();
    let per_trial: Vec<(Vec<f64>, Vec<f64>)> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let seed = derive_seed(0xACCE, 2, t as u64);
            let family = HashFamily::new(k, m, seed).unwrap();
            let mut template = AggregateSketch::new(family, params).unwrap();
            template.set_theta(Some(theta));
            let sketch = simulate_clients(ds.records(), &clients, Phase::Two, Some(&oracle), &template, seed)
                .unwrap()
                .sketch;
            let est = low_items
                .iter()
                .map(|&d| estimate_ldplcm(&sketch, &oracle, theta, d).unwrap().value)
                .collect();
            let raw = low_items.iter().map(|&d| sketch.hashed_sum(d) / k as f64).collect();
            (est, raw)
        })
        .collect();
    let (estimates, raw) = per_trial.into_iter().unzip();

    let truth: Vec<f64> = low_items.iter().map(|&d| ds.true_count(d) as f64).collect();
    let sum_sq_low: f64 = truth.iter().map(|f| f * f).sum();
    let c = params.c_epsilon();
    let (nf, mf, kf) = (n as f64, m as f64, k as f64);
    let bound = truth
        .iter()
        .map(|&f| {
            let b = nf * (c * c - 1.0) / 4.0 + (nf * (1.0 - theta) - f) / mf + sum_sq_low / (kf * mf);
            assert!((b - variance_bound(nf, mf, kf, theta, f, sum_sq_low, &params)).abs() <= 1e-9 * b);
            b
        })
        .collect();
    // exact variance over random hashing, row choice and perturbation
    let low_mass: f64 = truth.iter().sum();
    let exact = truth
        .iter()
        .map(|&f| {
            nf * (c * c - 1.0) / 4.0
                + (low_mass - f) / mf * (1.0 - 1.0 / mf) * (1.0 - 1.0 / kf)
                + (1.0 - 1.0 / mf) / (kf * mf) * (sum_sq_low - f * f)
        })
        .collect();
    TrialStats {
        low_items,
        truth,
        estimates,
        raw,
        bound,
        exact,
    }
}

fn column(rows: &[Vec<f64>], i: usize) -> Vec<f64> {
    rows.iter().map(|r| r[i]).collect()
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (mean, xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0))
}

fn c2_unbiased(stats: &TrialStats) -> Outcome {
    let t = stats.estimates.len() as f64;
    let ok = (0..stats.low_items.len())
        .filter(|&i| {
            let (mean, var) = mean_var(&column(&stats.estimates, i));
            (mean - stats.truth[i]).abs() <= 4.0 * var.sqrt() / t.sqrt()
        })
        .count();
    let frac = ok as f64 / stats.low_items.len() as f64;
    check(
        frac >= 0.95,
        format!("{ok}/{} low items within 4 sd/sqrt(T) ({:.1}%)", stats.low_items.len(), 100.0 * frac),
    )
}

fn c3_variance(stats: &TrialStats) -> Outcome {
    let items = stats.low_items.len();
    let ratios: Vec<f64> = (0..items)
        .map(|i| mean_var(&column(&stats.raw, i)).1 / stats.bound[i])
        .collect();
    let ok = ratios.iter().filter(|&&r| r <= 1.0).count();
    let est_ok = (0..items)
        .filter(|&i| mean_var(&column(&stats.estimates, i)).1 <= stats.bound[i])
        .count();
    let mean_ratio = ratios.iter().sum::<f64>() / items as f64;
    let exact_ratio = (0..items)
        .map(|i| mean_var(&column(&stats.raw, i)).1 / stats.exact[i])
        .sum::<f64>()
        / items as f64;
    let tightness = (0..items).map(|i| stats.exact[i] / stats.bound[i]).sum::<f64>() / items as f64;
    let frac = ok as f64 / items as f64;
    check(
        frac >= 0.95,
        format!(
            "{ok}/{items} low items with sample variance of the hashed sum <= bound ({:.1}%); \
             mean variance/bound {mean_ratio:.4}; mean variance/exact {exact_ratio:.4}; \
             exact/bound {tightness:.4}; debiased estimate within bound for {est_ok}/{items}",
            100.0 * frac
        ),
    )
}

fn c4_dummy_neutral() -> Outcome {
    let (n, m, k, trials) = (10_000u64, 128usize, 16usize, 200u64);
    let params = derive_privacy(4.0).unwrap();
    let family = HashFamily::new(k, m, 99).unwrap();
    let mut model = FrequencyModel::constant(0.0, Hyperparams::default());
    model.set_boundary(Boundary::Unbounded, 1.0);
    let probes: Vec<ItemKey> = (0..50).map(|i| ItemKey(i * 7919)).collect();
    let runs: Vec<Vec<f64>> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut sketch = AggregateSketch::new(family.clone(), params).unwrap();
            sketch.set_theta(Some(1.0));
            let dummy = encode_high(m).unwrap();
            for i in 0..n {
                let mut rng = ClientRng::new(derive_seed(4, t, 0), i);
                let j = rng.random_range(0..k);
                sketch.absorb(&Report::new(perturb(&dummy, &params, &mut rng), j).unwrap()).unwrap();
            }
            probes
                .iter()
                .map(|&d| estimate_ldplcm(&sketch, &model, 1.0, d).unwrap().value)
                .collect()
        })
        .collect();
    let mut worst: f64 = 0.0;
    let mut ok = 0;
    for i in 0..probes.len() {
        let (mean, var) = mean_var(&column(&runs, i));
        let z = mean.abs() / (var.sqrt() / (trials as f64).sqrt());
        worst = worst.max(z);
        ok += usize::from(z <= 4.0);
    }
    check(ok == probes.len(), format!("{ok}/{} probe keys within 4 sd/sqrt(T) of 0; max |z| {worst:.2}", probes.len()))
}

fn c5_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut model = FrequencyModel::constant(0.0, Hyperparams::default());
    model.set_boundary(Boundary::Unbounded, 0.0);
    let mut mismatches = 0;
    for case in 0..1000u64 {
        let k = rng.random_range(1..12);
        let m = rng.random_range(2..100);
        let eps = rng.random_range(0.1..8.0);
        let family = HashFamily::new(k, m, rng.random()).unwrap();
        let params = derive_privacy(eps).unwrap();
        let mut sketch = AggregateSketch::new(family.clone(), params).unwrap();
        for i in 0..rng.random_range(0..200u64) {
            let d = ItemKey(rng.random_range(0..50));
            let r = client_report(d, Phase::One, None, &params, &family, &mut ClientRng::new(case, i)).unwrap();
            sketch.absorb(&r.report).unwrap();
        }
        let d = ItemKey(rng.random_range(0..1000));
        let a = estimate_ldplcm(&sketch, &model, 0.0, d).unwrap().value;
        let b = estimate_cms(&sketch, d).unwrap();
        let c = estimate_low(&sketch, 0.0, d).unwrap();
        mismatches += usize::from(a.to_bits() != b.to_bits() || c.to_bits() != b.to_bits());
    }
    check(mismatches == 0, format!("{mismatches} bit mismatches over 1000 random sketches"))
}

fn c6_comparative() -> Outcome {
    let cfg = desk_config();
    let pairs: Vec<(f64, f64, f64, f64, u64)> = (0..10)
        .into_par_iter()
        .map(|i| {
            let c = cfg.with_seed(cfg.trial_seed(i));
            let ds = c.dataset.load(c.seed).unwrap();
            let a = run_on(&c, &ds).unwrap();
            let b = run_on(&ExperimentConfig { mechanism: Mechanism::AppleCms, ..c }, &ds).unwrap();
            (a.metrics().sse_low, b.metrics().sse_low, a.metrics().sse_total, b.metrics().sse_total, ds.domain_size())
        })
        .collect();
    let wins = pairs.iter().filter(|p| p.0 < p.1).count();
    let mean = |f: fn(&(f64, f64, f64, f64, u64)) -> f64| pairs.iter().map(f).sum::<f64>() / pairs.len() as f64;
    let (ours, theirs) = (mean(|p| p.2), mean(|p| p.3));
    let domains: Vec<u64> = pairs.iter().map(|p| p.4).collect();
    let domain_ok = domains.iter().all(|&d| (20_000..=30_000).contains(&d));
    check(
        wins >= 8 && ours < theirs && domain_ok,
        format!(
            "low-item SSE lower in {wins}/10 seeds; mean SSE_total {ours:.4e} vs {theirs:.4e}; realized domains {}..{}",
            domains.iter().min().unwrap(),
            domains.iter().max().unwrap()
        ),
    )
}

fn trend(axis: Axis, values: &[f64], strict: bool) -> Outcome {
    let points = sweep(&desk_config(), axis, values, 10).unwrap();
    let means: Vec<f64> = points.iter().map(|p| p.sse_total().mean).collect();
    let ok = means.windows(2).all(|w| if strict { w[1] < w[0] } else { w[1] <= w[0] });
    let listing: Vec<String> = values
        .iter()
        .zip(&means)
        .map(|(v, m)| format!("{axis}={v}: {m:.4e}"))
        .collect();
    check(ok, format!("trial-mean SSE_total {}", listing.join(", ")))
}

fn c9_cms_overestimates() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut violations = 0u64;
    let mut checked = 0u64;
    for _ in 0..10_000 {
        let domain = rng.random_range(1..40u64);
        let family = HashFamily::new(rng.random_range(1..6), rng.random_range(1..24), rng.random()).unwrap();
        let mut sketch = CountMinSketch::new(family);
        let mut exact = vec![0u64; domain as usize];
        for _ in 0..rng.random_range(0..300) {
            let d = rng.random_range(0..domain);
            exact[d as usize] += 1;
            sketch.update(ItemKey(d));
        }
        for (d, &f) in exact.iter().enumerate() {
            checked += 1;
            violations += u64::from(sketch.estimate(ItemKey(d as u64)) < f);
        }
    }
    check(violations == 0, format!("{violations} under-estimates over {checked} key checks in 10000 streams"))
}

fn r_squared(model: &FrequencyModel, xs: &[u64], ys: &[f64]) -> f64 {
    let mean = ys.iter().sum::<f64>() / ys.len() as f64;
    let ss_tot: f64 = ys.iter().map(|y| (y - mean).powi(2)).sum();
    let ss_res: f64 = xs.iter().zip(ys).map(|(&x, y)| (y - model.predict(ItemKey(x))).powi(2)).sum();
    1.0 - ss_res / ss_tot
}

fn c10_model_gate() -> Outcome {
    let xs: Vec<u64> = (0..1000).collect();
    let shapes: [(&str, fn(f64) -> f64); 3] = [
        ("linear", |x| 3.0 * x + 7.0),
        ("zipf", |x| 1e5 / (x + 1.0).powf(1.1)),
        ("sqrt", |x| x.sqrt()),
    ];
    let mut worst: f64 = 1.0;
    let mut round_trip = true;
    let mut parts = Vec::new();
    for (name, shape) in shapes {
        let ys: Vec<f64> = xs.iter().map(|&x| shape(x as f64)).collect();
        let train = TrainingSet {
            pairs: xs.iter().zip(&ys).map(|(&x, &y)| (ItemKey(x), y)).collect(),
            clamped_from: None,
        };
        let mut model = fit(&train, Hyperparams::default()).unwrap();
        model.set_boundary(Boundary::Finite(ys[500]), 0.5);
        let r2 = r_squared(&model, &xs, &ys);
        worst = worst.min(r2);
        parts.push(format!("{name} R2 {r2:.6}"));
        let back = FrequencyModel::deserialize(&model.serialize()).unwrap();
        round_trip &= (0..2000u64).all(|x| back.predict(ItemKey(x)).to_bits() == model.predict(ItemKey(x)).to_bits())
            && back.boundary() == model.boundary();
    }
    check(worst >= 0.999 && round_trip, format!("{}; round trip exact: {round_trip}", parts.join(", ")))
}

fn c11_determinism() -> Outcome {
    let cfg = desk_config();
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| run_protocol(&cfg).unwrap())
    };
    let (a, b, c) = (run(1), run(8), run(8));
    let same_summary = a.summary_json() == b.summary_json() && b.summary_json() == c.summary_json();
    let same_items = a.items == b.items;
    let same_sketch = a.sketch.to_bytes() == b.sketch.to_bytes();
    let same_model = a.model.as_ref().map(|m| m.serialize()) == b.model.as_ref().map(|m| m.serialize());
    check(
        same_summary && same_items && same_sketch && same_model,
        format!(
            "summary identical: {same_summary}; items: {same_items}; sketch: {same_sketch}; model: {same_model} ({} summary bytes)",
            a.summary_json().len()
        ),
    )
}

fn main() {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let selected = |id: u32| filter.is_empty() || filter.iter().any(|f| f == &id.to_string());

    let mut failures = 0;
    let mut report = |id: u32, name: &str, limit: Duration, f: &mut dyn FnMut() -> Outcome| {
        if !selected(id) {
            return;
        }
        let start = Instant::now();
        let outcome = f();
        let elapsed = start.elapsed();
        let in_time = elapsed <= limit;
        let pass = outcome.pass && in_time;
        failures += usize::from(!pass);
        println!(
            "criterion {id:>2} {}: {name}: {} [{:.2}s, limit {}s{}]",
            if pass { "PASS" } else { "FAIL" },
            outcome.detail,
            elapsed.as_secs_f64(),
            limit.as_secs(),
            if in_time { "" } else { ", exceeded" }
        );
    };

    let secs = Duration::from_secs;
    report(1, "exact privacy ratio", secs(1), &mut c1_privacy_ratio);
    let mut stats = None;
    report(2, "unbiasedness", secs(120), &mut || {
        let s = unbiasedness_trials();
        let out = c2_unbiased(&s);
        stats = Some(s);
        out
    });
    report(3, "variance bound", secs(120), &mut || {
        let s = stats.take().unwrap_or_else(unbiasedness_trials);
        c3_variance(&s)
    });
    report(4, "dummy neutrality", secs(60), &mut c4_dummy_neutral);
    report(5, "estimator identity", secs(5), &mut c5_identity);
    report(6, "comparative accuracy", secs(300), &mut c6_comparative);
    report(7, "theta monotonicity", secs(900), &mut || trend(Axis::Theta, &[0.3, 0.4, 0.5, 0.6], true));
    report(8, "sampling-rate trend", secs(600), &mut || trend(Axis::R, &[0.1, 0.2, 0.3], false));
    report(9, "count-min over-estimation", secs(30), &mut c9_cms_overestimates);
    report(10, "model quality gate", secs(30), &mut c10_model_gate);
    report(11, "determinism across job counts", secs(120), &mut c11_determinism);

    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
