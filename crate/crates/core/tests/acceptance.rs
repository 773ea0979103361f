//! Acceptance checks. Runs as a plain binary so every line is printed, then
//! exits nonzero if any check failed.

use std::time::{Duration, Instant};

use rand::Rng;
use rayon::prelude::*;

use fedgroup::clustering::{kmeans, purity};
use fedgroup::data::{partition, DeviceDataset, NonIidCase, Sample, SyntheticSpec};
use fedgroup::features::FeatureExtractor;
use fedgroup::lsh::{collision_rate, LshFamily, LshFunction};
use fedgroup::nn::{
    forward_loss, gradient, init_weights, local_train, Batch, ModelSpec, ModelWeights, TrainParams,
};
use fedgroup::orchestrator::{aggregate, preprocess, DeviceUpdate, GroupingMode, LshConfig};
use fedgroup::rng;
use fedgroup::runner::{self, parse_config_str, ExperimentConfig};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn random_batch(rng: &mut rng::Stream, n: usize, dim: usize, classes: usize) -> Batch {
    let inputs = (0..n * dim).map(|_| rng.random_range(-2.0..2.0)).collect();
    let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
    Batch::new(inputs, dim, labels).unwrap()
}

fn gradient_oracle() -> Verdict {
    let mut rng = rng::stream(2024);
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let depth = rng.random_range(1..=2);
        let mut dims = vec![rng.random_range(1..=8)];
        for _ in 1..depth {
            dims.push(rng.random_range(1..=8));
        }
        dims.push(rng.random_range(2..=4));
        let spec = ModelSpec::new(dims.clone()).unwrap();
        let params = (0..spec.param_count())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let w = ModelWeights::from_params(spec.clone(), params).unwrap();
        let n = rng.random_range(1..=16);
        let batch = random_batch(&mut rng, n, dims[0], *dims.last().unwrap());
        let analytic = gradient(&w, &batch).unwrap();
        let mut numeric = Vec::with_capacity(analytic.len());
        for i in 0..analytic.len() {
            let mut plus = w.params().to_vec();
            let mut minus = w.params().to_vec();
            plus[i] += eps;
            minus[i] -= eps;
            let lp = forward_loss(
                &ModelWeights::from_params(spec.clone(), plus).unwrap(),
                &batch,
            )
            .unwrap()
            .0;
            let lm = forward_loss(
                &ModelWeights::from_params(spec.clone(), minus).unwrap(),
                &batch,
            )
            .unwrap()
            .0;
            numeric.push((lp - lm) / (2.0 * eps));
        }
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, b)| a - b).collect();
        let scale = norm(&analytic).max(norm(&numeric));
        let rel = if scale == 0.0 {
            0.0
        } else {
            norm(&diff) / scale
        };
        worst = worst.max(rel);
    }
    verdict(
        worst < 1e-4,
        format!("worst relative error {worst:.2e} over 100 instances"),
    )
}

fn aggregation_oracle() -> Verdict {
    let spec = ModelSpec::new(vec![4, 8, 3]).unwrap();
    let w = init_weights(&spec, 11);
    let mut rng = rng::stream(12);
    let per_device = 8;
    let devices: Vec<DeviceDataset> = (0..3)
        .map(|id| DeviceDataset {
            device_id: id,
            samples: (0..per_device)
                .map(|_| {
                    let x = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
                    Sample::new(x, rng.random_range(0..3))
                })
                .collect(),
            source_indices: Vec::new(),
        })
        .collect();
    let lr = 0.1;
    let params = TrainParams {
        epochs: 1,
        lr,
        batch_size: per_device,
    };
    let updates: Vec<DeviceUpdate> = devices
        .iter()
        .map(|d| DeviceUpdate {
            device: d.device_id,
            delta: local_train(&w, d, &params, &mut rng::stream(d.device_id as u64)).unwrap(),
            samples: d.len(),
        })
        .collect();
    let federated = aggregate(&w, &updates).unwrap();
    let pooled = Batch::from_samples(devices.iter().flat_map(|d| &d.samples)).unwrap();
    let g = gradient(&w, &pooled).unwrap();
    let err = federated
        .params()
        .iter()
        .zip(w.params().iter().zip(&g))
        .map(|(f, (p, gi))| (f - (p - lr * gi)).abs())
        .fold(0.0, f64::max);
    verdict(
        err <= 1e-8,
        format!("max deviation from pooled step {err:.2e}"),
    )
}

fn lsh_formula() -> Verdict {
    let f = |a: Vec<f64>, b: f64, r: f64, v: &[f64]| LshFunction { a, b, r }.eval(v).unwrap();
    let mut ok = f(vec![1.0, 0.0], 0.0, 3.0, &[4.5, 7.0]) == 1
        && f(vec![1.0, 1.0], 2.9, 3.0, &[-2.0, -2.0]) == -1;
    let fam = LshFamily::sample(16, 6, 3.0, 5).unwrap();
    ok &= fam.hash_slice(&[0.0; 6]).unwrap().0.iter().all(|&c| c == 0);
    let examples_ok = ok;

    let mut rng = rng::stream(77);
    let mut shift_failures = 0;
    for trial in 0..1000 {
        let h = rng.random_range(1..=8);
        let d = rng.random_range(1..=16);
        let r = rng.random_range(0.5..10.0);
        let fam = LshFamily::sample(h, d, r, trial).unwrap();
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-20.0..20.0)).collect();
        let base = fam.hash_slice(&v).unwrap();
        // The shifted offset leaves [0, r], which a sampled family never has,
        // so evaluate the functions one by one.
        let moved: Vec<i64> = fam
            .functions()
            .iter()
            .map(|f| {
                let g = LshFunction {
                    b: f.b + f.r,
                    ..f.clone()
                };
                g.eval(&v).unwrap()
            })
            .collect();
        if base.0.iter().zip(&moved).any(|(x, y)| x + 1 != *y) {
            shift_failures += 1;
        }
    }
    verdict(
        examples_ok && shift_failures == 0,
        format!(
            "examples {}, shift property failed on {shift_failures}/1000",
            if examples_ok { "exact" } else { "wrong" }
        ),
    )
}

/// Collision probability of one Gaussian hash with window `r` for two points
/// `c` apart, by Simpson's rule.
fn collision_integral(c: f64, r: f64) -> f64 {
    let phi = |x: f64| (-x * x / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let f = |t: f64| (2.0 / c) * phi(t / c) * (1.0 - t / r);
    let n = 20_000;
    let h = r / n as f64;
    let mut s = f(0.0) + f(r);
    for i in 1..n {
        s += f(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

fn lsh_sensitivity() -> Verdict {
    let (d, r) = (8, 3.0);
    let grid = [0.1, 0.5, 1.0, 2.0, 5.0, 10.0];
    let rates: Vec<f64> = grid
        .par_iter()
        .enumerate()
        .map(|(i, m)| collision_rate(d, r, m * r, 100_000, 900 + i as u64).unwrap())
        .collect();
    let monotone = rates.windows(2).all(|p| p[1] <= p[0] + 0.005);
    let oracle = collision_integral(r, r);
    let at_r = rates[2];
    let matches = (at_r - oracle).abs() <= 0.01;
    let gap = rates[1] > rates[4] + 0.2;
    let shown: Vec<String> = rates.iter().map(|x| format!("{x:.4}")).collect();
    verdict(
        monotone && matches && gap,
        format!(
            "rates [{}], at r {at_r:.4} vs integral {oracle:.4}",
            shown.join(", ")
        ),
    )
}

/// Case-1 devices over four well-separated classes, with their dominant labels.
fn purity_fixture(seed: u64) -> (Vec<DeviceDataset>, Vec<usize>) {
    let spec = SyntheticSpec {
        class_count: 4,
        input_dim: 32,
        per_class: 300,
        test_per_class: 0,
        ..SyntheticSpec::default()
    };
    let (train, _) = spec.generate(seed).unwrap();
    let devices = partition(&train, 20, 50, NonIidCase::Case1, seed).unwrap();
    let labels = (0..20).map(|i| NonIidCase::dominant_label(i, 4)).collect();
    (devices, labels)
}

fn grouping_purity() -> Verdict {
    let ex = FeatureExtractor::identity(32).unwrap();
    let results: Vec<(f64, f64)> = (0..10u64)
        .into_par_iter()
        .map(|seed| {
            let (devices, labels) = purity_fixture(seed);
            let plain = preprocess(&devices, &ex, 4, GroupingMode::Plain, seed).unwrap();
            let lsh_mode = GroupingMode::Lsh(LshConfig {
                h: 8,
                r: 3.0,
                seed: seed + 1000,
            });
            let hashed = preprocess(&devices, &ex, 4, lsh_mode, seed).unwrap();
            (
                purity(&plain, &labels).unwrap(),
                purity(&hashed, &labels).unwrap(),
            )
        })
        .collect();
    let plain = results.iter().filter(|r| r.0 == 1.0).count();
    let lsh = results.iter().filter(|r| r.1 == 1.0).count();
    verdict(
        plain >= 9 && lsh >= 9,
        format!("purity 1.0 on {plain}/10 seeds plain, {lsh}/10 seeds LSH"),
    )
}

/// Shared synthetic fixture for the accuracy orderings. The common offset on
/// every class mean makes single-label local training drift, as on image data.
const ORDERING_FIXTURE: &str = "
classes = 5
input_dim = 10
per_class = 600
test_per_class = 200
separation = 5
offset = 4
hidden = 16
devices = 20
per_device = 100
k = 5
rounds = 50
";

const SEEDS: u64 = 5;

/// Median over seeds of the test accuracy after the last round.
fn median_accuracy(base: &ExperimentConfig, strategy: &str, case: &str) -> f64 {
    let accs = (0..SEEDS)
        .into_par_iter()
        .map(|seed| {
            let cfg = base
                .with("strategy", strategy)
                .and_then(|c| c.with("case", case))
                .and_then(|c| c.with("seed", &seed.to_string()))
                .unwrap();
            let outcome = runner::run_experiment(&cfg, Some(1)).unwrap();
            outcome.records.last().unwrap().test_accuracy
        })
        .collect();
    median(accs)
}

fn skew_ordering() -> Verdict {
    let base = parse_config_str(ORDERING_FIXTURE).unwrap();
    let iid = median_accuracy(&base, "fedavg", "iid");
    let case4 = median_accuracy(&base, "fedavg", "case4");
    let case1 = median_accuracy(&base, "fedavg", "case1");
    verdict(
        iid >= case4 && case4 >= case1 && iid - case1 >= 0.05,
        format!("FedAvg iid {iid:.4}, case4 {case4:.4}, case1 {case1:.4}"),
    )
}

fn grouping_beats_random() -> Verdict {
    let base = parse_config_str(ORDERING_FIXTURE).unwrap();
    let fedavg = median_accuracy(&base, "fedavg", "case1");
    let fldg = median_accuracy(&base, "fldg", "case1");
    let fldg_l = median_accuracy(&base, "fldg-l", "case1");
    verdict(
        fldg - fedavg >= 0.03 && fldg_l - fedavg >= 0.03 && (fldg - fldg_l).abs() <= 0.02,
        format!("case1 FedAvg {fedavg:.4}, FLDG {fldg:.4}, FLDG-L {fldg_l:.4}"),
    )
}

fn group_count_trend() -> Verdict {
    // Ten labels over twenty devices, so every K in the sweep splits the
    // labels evenly.
    let base = parse_config_str(ORDERING_FIXTURE)
        .and_then(|c| c.with("classes", "10"))
        .and_then(|c| c.with("per_class", "300"))
        .and_then(|c| c.with("test_per_class", "100"))
        .and_then(|c| c.with("rounds", "30"))
        .unwrap();
    let accs: Vec<f64> = [2, 5, 10]
        .iter()
        .map(|k| median_accuracy(&base.with("k", &k.to_string()).unwrap(), "fldg", "case1"))
        .collect();
    verdict(
        accs.windows(2).all(|p| p[1] >= p[0]),
        format!(
            "FLDG at round 30: K=2 {:.4}, K=5 {:.4}, K=10 {:.4}",
            accs[0], accs[1], accs[2]
        ),
    )
}

fn output_dimension_trend() -> Verdict {
    let ex = FeatureExtractor::identity(32).unwrap();
    let dims = [1usize, 2, 5, 8];
    let medians: Vec<f64> = dims
        .iter()
        .map(|&h| {
            let scores = (0..10u64)
                .into_par_iter()
                .map(|seed| {
                    let (devices, labels) = purity_fixture(seed);
                    // Hash and cluster directly: h=1 is below the family-size
                    // bound that the preprocessing entry point enforces for K=4.
                    let fam = LshFamily::sample(h, 32, 3.0, seed + 1000).unwrap();
                    let codes: Vec<Vec<f64>> = devices
                        .iter()
                        .map(|d| {
                            fam.hash(&ex.device_avg_feature(d).unwrap())
                                .unwrap()
                                .embed()
                        })
                        .collect();
                    let groups = kmeans(&codes, 4, seed, 100).unwrap();
                    purity(&groups, &labels).unwrap()
                })
                .collect();
            median(scores)
        })
        .collect();
    let shown: Vec<String> = dims
        .iter()
        .zip(&medians)
        .map(|(h, m)| format!("h={h} {m:.3}"))
        .collect();
    verdict(
        medians.windows(2).all(|p| p[1] >= p[0]),
        format!("median purity {}", shown.join(", ")),
    )
}

fn determinism() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let base = parse_config_str(
        "classes = 4\ninput_dim = 8\nper_class = 200\ntest_per_class = 50\n\
         devices = 12\nper_device = 40\nk = 4\nrounds = 6\nrecluster_period = 2\n\
         case = case3\nseed = 9\n",
    )
    .unwrap();
    let mut mismatches = Vec::new();
    for strategy in ["fedavg", "fldg", "fldg-l", "k-center"] {
        let path = dir.path().join(format!("{strategy}.csv"));
        let cfg = base
            .with("strategy", strategy)
            .and_then(|c| c.with("out", path.to_str().unwrap()))
            .unwrap();
        let mut outputs = Vec::new();
        for threads in [Some(1), Some(4), None, Some(1)] {
            runner::run(&cfg, threads).unwrap();
            outputs.push(std::fs::read(&path).unwrap());
        }
        if outputs.windows(2).any(|p| p[0] != p[1]) {
            mismatches.push(strategy);
        }
    }
    verdict(
        mismatches.is_empty(),
        if mismatches.is_empty() {
            "identical CSVs for 1, 4 and default worker threads, all strategies".to_string()
        } else {
            format!("CSVs differ for {}", mismatches.join(", "))
        },
    )
}

type Check = (u32, &'static str, fn() -> Verdict, Duration);

fn main() {
    let checks: [Check; 10] = [
        (
            1,
            "gradient oracle",
            gradient_oracle,
            Duration::from_secs(30),
        ),
        (
            2,
            "aggregation oracle",
            aggregation_oracle,
            Duration::from_secs(5),
        ),
        (3, "LSH formula", lsh_formula, Duration::from_secs(60)),
        (
            4,
            "LSH sensitivity",
            lsh_sensitivity,
            Duration::from_secs(60),
        ),
        (
            5,
            "grouping purity",
            grouping_purity,
            Duration::from_secs(10),
        ),
        (
            6,
            "skew hurts FedAvg",
            skew_ordering,
            Duration::from_secs(300),
        ),
        (
            7,
            "grouping beats random selection",
            grouping_beats_random,
            Duration::from_secs(900),
        ),
        (
            8,
            "more groups help",
            group_count_trend,
            Duration::from_secs(600),
        ),
        (
            9,
            "longer hash codes group better",
            output_dimension_trend,
            Duration::from_secs(600),
        ),
        (10, "determinism", determinism, Duration::from_secs(300)),
    ];
    let only: Option<u32> = std::env::args().nth(1).and_then(|a| a.parse().ok());
    let mut failed = 0;
    for (id, name, check, budget) in checks {
        if only.is_some_and(|o| o != id) {
            continue;
        }
        let start = Instant::now();
        let v = check();
        let elapsed = start.elapsed();
        let pass = v.pass && elapsed <= budget;
        if !pass {
            failed += 1;
        }
        println!(
            "{} {id:>2} {name}: {} ({:.1}s of {}s)",
            if pass { "PASS" } else { "FAIL" },
            v.detail,
            elapsed.as_secs_f64(),
            budget.as_secs()
        );
    }
    if failed > 0 {
        println!("{failed} acceptance check(s) failed");
        std::process::exit(1);
    }
}
