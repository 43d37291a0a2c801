//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.
//!
//! Run with `cargo test --release --test acceptance` (or without
//! `--release`; the test profile is optimized).

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use pairmmd::cluster::{self, local_search_observed, objective, ClusterState};
use pairmmd::kernel::GramMatrix;
use pairmmd::metric::wasserstein2_sq;
use pairmmd::missingness::{ipw_weights, WeightNormalization};
use pairmmd::mmd::{mmd_paired, mmd_two_sample, mmd_weighted};
use pairmmd::simgen::{
    self, observation_probability, LocationScaleModel, Scenario, ScenarioConfig, StudyRow,
};
use pairmmd::testing::{mcar_test, replica_rng, wild_weights, McarConfig};
use pairmmd::{KernelSpec, Metric, Observation, PairedDataset, ProbabilityGrid, QuantileFunction};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

// ---------------------------------------------------------------------------
// Independent oracles

fn oracle_sq_dist(x: &Observation, y: &Observation) -> f64 {
    match (x, y) {
        (Observation::Quantile(a), Observation::Quantile(b)) => {
            let m = a.values().len() as f64;
            a.values().iter().zip(b.values()).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / m
        }
        _ => x.values().iter().zip(y.values()).map(|(p, q)| (p - q) * (p - q)).sum(),
    }
}

fn oracle_k(x: &Observation, y: &Observation, bw: f64) -> f64 {
    (-oracle_sq_dist(x, y) / bw).exp()
}

fn oracle_two_sample(a: &[Observation], b: &[Observation], bw: f64) -> f64 {
    let (p, q) = (a.len() as f64, b.len() as f64);
    let mut saa = 0.0;
    for x in a {
        for y in a {
            saa += oracle_k(x, y, bw);
        }
    }
    let mut sbb = 0.0;
    for x in b {
        for y in b {
            sbb += oracle_k(x, y, bw);
        }
    }
    let mut sab = 0.0;
    for x in a {
        for y in b {
            sab += oracle_k(x, y, bw);
        }
    }
    saa / (p * p) + sbb / (q * q) - 2.0 * sab / (p * q)
}

fn oracle_weighted(pairs: &[(Observation, Observation)], w: &[f64], bw: f64) -> f64 {
    let mut t = 0.0;
    for (i, (x1i, x2i)) in pairs.iter().enumerate() {
        for (j, (x1j, x2j)) in pairs.iter().enumerate() {
            let h = oracle_k(x1i, x1j, bw) + oracle_k(x2i, x2j, bw) - oracle_k(x1i, x2j, bw) - oracle_k(x2i, x1j, bw);
            t += w[i] * w[j] * h;
        }
    }
    t
}

// ---------------------------------------------------------------------------
// Study helpers

fn study(scenario: Scenario, rhos: &[f64], z2: (f64, f64), seed: u64) -> Vec<StudyRow> {
    let configs: Vec<ScenarioConfig> = rhos
        .iter()
        .map(|&rho| {
            let mut c = ScenarioConfig::new(scenario, rho, (30.0, 50.0), z2);
            c.reps = 500;
            c.bootstrap = 300;
            c.seed = seed;
            c
        })
        .collect();
    simgen::run_study(&configs, 0.05).expect("study runs")
}

fn rates(rows: &[StudyRow]) -> String {
    rows.iter()
        .map(|r| format!("rho={} rate={:.3}", r.config.rho, r.rate))
        .collect::<Vec<_>>()
        .join(", ")
}

// ---------------------------------------------------------------------------
// Criteria

fn mcar_null() -> Outcome {
    let rows = study(Scenario::Mcar { n1: 50, n2: 50, n3: 50 }, &[0.0, 0.4, 0.8], (30.0, 50.0), 101);
    let pass = rows.iter().all(|r| (0.01..=0.09).contains(&r.rate));
    outcome(pass, rates(&rows))
}

fn mcar_power() -> Outcome {
    let rows = study(Scenario::Mcar { n1: 50, n2: 50, n3: 50 }, &[0.0, 0.4, 0.8], (50.0, 70.0), 202);
    let pass = rows.iter().all(|r| r.rate >= 0.90);
    outcome(pass, rates(&rows))
}

fn mar_calibration_and_power() -> Outcome {
    let null = study(Scenario::Mar { n: 100 }, &[0.0, 0.8], (30.0, 50.0), 303);
    let alt = study(Scenario::Mar { n: 100 }, &[0.0, 0.8], (50.0, 70.0), 404);
    let pass = null.iter().all(|r| (0.01..=0.09).contains(&r.rate)) && alt.iter().all(|r| r.rate >= 0.70);
    outcome(pass, format!("null [{}]; alternative [{}]", rates(&null), rates(&alt)))
}

fn random_obs(kind: usize, rng: &mut ChaCha8Rng, grid: &ProbabilityGrid) -> Observation {
    match kind {
        0 => Observation::Scalar(rng.random_range(-2.0..2.0)),
        1 => Observation::Vector((0..3).map(|_| rng.random_range(-2.0..2.0)).collect()),
        _ => {
            let mut v: Vec<f64> = (0..grid.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            v.sort_by(f64::total_cmp);
            Observation::Quantile(QuantileFunction::new(grid.clone(), v).unwrap())
        }
    }
}

fn oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let grid = ProbabilityGrid::midpoint(6).unwrap();
    let mut worst = 0.0f64;
    for inst in 0..100 {
        let kind = inst % 3;
        let metric = if kind == 2 { Metric::Wasserstein2 } else { Metric::Euclidean };
        let bw = rng.random_range(0.3..3.0);
        let spec = KernelSpec::gaussian(bw, metric).unwrap();
        let p = rng.random_range(1..=8);
        let q = rng.random_range(1..=8);
        let a: Vec<Observation> = (0..p).map(|_| random_obs(kind, &mut rng, &grid)).collect();
        let b: Vec<Observation> = (0..q).map(|_| random_obs(kind, &mut rng, &grid)).collect();
        let ar: Vec<&Observation> = a.iter().collect();
        let br: Vec<&Observation> = b.iter().collect();
        let t = mmd_two_sample(&ar, &br, &spec).unwrap().value();
        worst = worst.max((t - oracle_two_sample(&a, &b, bw).max(0.0)).abs());

        let n = rng.random_range(1..=8);
        let pairs: Vec<(Observation, Observation)> = (0..n)
            .map(|_| (random_obs(kind, &mut rng, &grid), random_obs(kind, &mut rng, &grid)))
            .collect();
        let uniform = vec![1.0 / n as f64; n];
        let t = mmd_paired(&pairs, &spec).unwrap().value();
        worst = worst.max((t - oracle_weighted(&pairs, &uniform, bw).max(0.0)).abs());
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let t = mmd_weighted(&pairs, &w, &spec).unwrap().value();
        worst = worst.max((t - oracle_weighted(&pairs, &w, bw).max(0.0)).abs());
    }
    outcome(worst <= 1e-12, format!("max abs deviation {worst:.3e} over 300 comparisons"))
}

fn wasserstein_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let grid = ProbabilityGrid::midpoint(64).unwrap();
    let quantile = |rng: &mut ChaCha8Rng| {
        let mut v: Vec<f64> = (0..64).map(|_| rng.random_range(-5.0..5.0)).collect();
        v.sort_by(f64::total_cmp);
        QuantileFunction::new(grid.clone(), v).unwrap()
    };
    let mut symmetric = true;
    let mut worst_triangle = f64::NEG_INFINITY;
    let mut shift_exact = true;
    for _ in 0..1000 {
        let (f, g, h) = (quantile(&mut rng), quantile(&mut rng), quantile(&mut rng));
        let fg = wasserstein2_sq(&f, &g).unwrap();
        symmetric &= fg.to_bits() == wasserstein2_sq(&g, &f).unwrap().to_bits();
        let gh = wasserstein2_sq(&g, &h).unwrap();
        let fh = wasserstein2_sq(&f, &h).unwrap();
        worst_triangle = worst_triangle.max(fh.sqrt() - fg.sqrt() - gh.sqrt());

        // dyadic values and shifts keep every operation exact
        let base: Vec<f64> = {
            let mut v: Vec<f64> = (0..64).map(|_| rng.random_range(-512i32..512) as f64 / 64.0).collect();
            v.sort_by(f64::total_cmp);
            v
        };
        let c = rng.random_range(-256i32..256) as f64 / 32.0;
        let q = QuantileFunction::new(grid.clone(), base.clone()).unwrap();
        let qc = QuantileFunction::new(grid.clone(), base.iter().map(|v| v + c).collect()).unwrap();
        shift_exact &= wasserstein2_sq(&q, &qc).unwrap() == c * c;
    }
    let pass = symmetric && worst_triangle <= 1e-9 && shift_exact;
    outcome(
        pass,
        format!("symmetry exact={symmetric}, worst triangle excess {worst_triangle:.3e}, shift exact={shift_exact}"),
    )
}

fn wild_bootstrap_process() -> Outcome {
    let (n1, l, sequences) = (200usize, 14.14, 50_000u64);
    let mut sum = vec![0.0; n1];
    let mut sum_sq = vec![0.0; n1];
    let mut cross = vec![0.0; n1 - 1];
    for s in 0..sequences {
        let w = wild_weights(n1, l, &mut replica_rng(6, s)).unwrap();
        for i in 0..n1 {
            sum[i] += w[i];
            sum_sq[i] += w[i] * w[i];
            if i + 1 < n1 {
                cross[i] += w[i] * w[i + 1];
            }
        }
    }
    let m = sequences as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / m).collect();
    let var: Vec<f64> = (0..n1).map(|i| (sum_sq[i] - m * mean[i] * mean[i]) / (m - 1.0)).collect();
    let target = (-1.0 / l).exp();
    let corr: Vec<f64> = (0..n1 - 1)
        .map(|i| {
            let cov = (cross[i] - m * mean[i] * mean[i + 1]) / (m - 1.0);
            cov / (var[i] * var[i + 1]).sqrt()
        })
        .collect();
    let (vmin, vmax) = var.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
    let worst_corr = corr.iter().map(|c| (c - target).abs()).fold(0.0, f64::max);
    let pass = vmin >= 0.97 && vmax <= 1.03 && worst_corr <= 0.02;
    outcome(
        pass,
        format!(
            "variance range [{vmin:.4}, {vmax:.4}], max |lag-1 corr - {target:.4}| = {worst_corr:.4}"
        ),
    )
}

fn exact_small_sample() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let b = 10_000usize;
    let mut details = Vec::new();
    let mut pass = true;
    for dataset in 0..5 {
        let values: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
        let first: Vec<(String, Observation)> =
            (0..3).map(|i| (format!("f{i}"), Observation::Scalar(values[i]))).collect();
        let second: Vec<(String, Observation)> =
            (0..3).map(|i| (format!("s{i}"), Observation::Scalar(values[3 + i]))).collect();
        let ds = PairedDataset::from_blocks(Vec::new(), first, second).unwrap();
        let bw = 1.0;
        let obs: Vec<Observation> = values.iter().map(|&v| Observation::Scalar(v)).collect();
        let observed = oracle_two_sample(&obs[..3], &obs[3..], bw);
        let mut hits = 0;
        for mask in 0u32..64 {
            if mask.count_ones() != 3 {
                continue;
            }
            let a: Vec<Observation> = (0..6).filter(|i| mask & (1 << i) != 0).map(|i| obs[i].clone()).collect();
            let c: Vec<Observation> = (0..6).filter(|i| mask & (1 << i) == 0).map(|i| obs[i].clone()).collect();
            if oracle_two_sample(&a, &c, bw) >= observed - 1e-12 {
                hits += 1;
            }
        }
        let exact = hits as f64 / 20.0;
        let spec = KernelSpec::gaussian(bw, Metric::Euclidean).unwrap();
        let config = McarConfig {
            alpha: 0.0,
            bootstrap: b,
            l_param: 1.0,
            seed: 70 + dataset,
            plus_one: false,
        };
        let mc = mcar_test(&ds, &spec, &config).unwrap().p_value;
        let bound = 2.576 * (exact * (1.0 - exact) / b as f64).sqrt();
        let ok = (mc - exact).abs() <= bound;
        pass &= ok;
        details.push(format!("exact {exact:.2} vs {mc:.4}"));
    }
    outcome(pass, details.join(", "))
}

fn quantile_obs(grid: &ProbabilityGrid, shift: f64, slope: f64) -> Observation {
    let v = grid.points().iter().map(|t| shift + slope * t).collect();
    Observation::Quantile(QuantileFunction::new(grid.clone(), v).unwrap())
}

fn clustering() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut trace_ok = true;
    let mut delta_worst = 0.0f64;
    let mut moves = 0usize;
    for _ in 0..100 {
        let n = rng.random_range(6..20);
        let k = rng.random_range(2..5);
        let xs: Vec<(f64, f64)> = (0..n).map(|_| (rng.random_range(0.0..4.0), rng.random_range(0.0..4.0))).collect();
        let gram = GramMatrix::from_fn(n, n, |i, j| {
            (-((xs[i].0 - xs[j].0).powi(2) + (xs[i].1 - xs[j].1).powi(2)) / 2.0).exp()
        });
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
        let init: Vec<usize> = (0..n).map(|j| if j < k { j } else { rng.random_range(0..k) }).collect();
        let state = ClusterState::new(init, k, &gram, &w).unwrap();
        let mut last = objective(&state, &gram, &w).unwrap();
        let (_, trace, _, _) = local_search_observed(state, &gram, &w, 100, |mv, before, after| {
            let b = objective(before, &gram, &w).unwrap();
            let a = objective(after, &gram, &w).unwrap();
            delta_worst = delta_worst.max((mv.gain - (a - b)).abs());
            trace_ok &= a >= last;
            last = a;
            moves += 1;
        });
        trace_ok &= trace.windows(2).all(|p| p[1] >= p[0]);
    }

    let grid = ProbabilityGrid::midpoint(20).unwrap();
    let mut recovered = 0;
    for run in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(800 + run);
        let mut labels: Vec<usize> = (0..16).map(|j| j % 2).collect();
        labels.shuffle(&mut rng);
        // within-group shifts in [0, 1); groups 40 apart
        let pairs: Vec<(Observation, Observation)> = labels
            .iter()
            .map(|&g| {
                let base = 40.0 * g as f64;
                (
                    quantile_obs(&grid, base + rng.random::<f64>(), 1.0),
                    quantile_obs(&grid, base + rng.random::<f64>(), 1.0),
                )
            })
            .collect();
        let refs: Vec<_> = pairs.iter().collect();
        let bw = cluster::pair_bandwidth(&refs, Metric::Wasserstein2).unwrap();
        let gram = cluster::pair_gram(&refs, bw, Metric::Wasserstein2).unwrap();
        let w: Vec<f64> = (0..16).map(|_| rng.random_range(0.5..1.5) / 16.0).collect();
        let res = cluster::cluster(&gram, &w, 2, 100, run, cluster::DEFAULT_RESTARTS).unwrap();
        let a: Vec<usize> = res.assignment.iter().map(|c| c.unwrap()).collect();
        let same = (0..16).all(|j| (a[j] == a[0]) == (labels[j] == labels[0]));
        if same {
            recovered += 1;
        }
    }
    let pass = trace_ok && delta_worst <= 1e-9 && recovered >= 95;
    outcome(
        pass,
        format!(
            "trace nondecreasing={trace_ok}, max |dS - recomputed| {delta_worst:.3e} over {moves} moves, planted recovered {recovered}/100"
        ),
    )
}

fn ipw_sanity() -> Outcome {
    let mut config = ScenarioConfig::new(Scenario::Mar { n: 10_000 }, 0.0, (30.0, 50.0), (30.0, 50.0));
    // the weights depend only on the missingness noise; a short grid keeps
    // generation cheap
    config.model = LocationScaleModel {
        grid: ProbabilityGrid::midpoint(4).unwrap(),
        ..LocationScaleModel::default()
    };
    let totals: Vec<f64> = (0..1000u64)
        .map(|d| {
            let ds = simgen::generate_mar(&config, &mut replica_rng(9, d)).unwrap();
            let pi: Vec<f64> = ds
                .covariates()
                .unwrap()
                .iter()
                .map(|y| observation_probability(y[0], y[1]))
                .collect();
            ipw_weights(&ds, &pi, 0.01, WeightNormalization::Raw).unwrap().total()
        })
        .collect();
    let mean = totals.iter().sum::<f64>() / totals.len() as f64;
    outcome((mean - 1.0).abs() <= 0.02, format!("mean total weight {mean:.4}"))
}

fn run_cli(args: &[&str], dir: &Path) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_pairmmd"))
        .args(args)
        .current_dir(dir)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

fn cli_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let setup = [
        vec!["simulate", "--scenario", "mar", "--n", "80", "--rho", "0.4", "--reps", "2", "--bootstrap", "20", "--seed", "3", "--dataset-out", "mar.csv", "--covariates-out", "cov.csv", "--out", "setup.csv"],
        vec!["simulate", "--scenario", "mcar", "--n1", "30", "--n2", "20", "--n3", "20", "--reps", "2", "--bootstrap", "20", "--seed", "4", "--dataset-out", "mcar.csv", "--out", "setup2.csv"],
    ];
    for a in &setup {
        if let Err(e) = run_cli(a, d) {
            return outcome(false, e);
        }
    }
    std::fs::write(d.join("sample.csv"), (1..200).map(|i| format!("{}\n", (i * 37 % 101) as f64 / 7.0)).collect::<String>()).unwrap();

    // each command writes into a per-run directory; outputs are compared byte for byte
    let commands: Vec<(&str, Vec<&str>, Vec<&str>)> = vec![
        ("simulate", vec!["simulate", "--scenario", "mcar", "--rho", "0", "--reps", "10", "--seed", "7", "--out", "OUT/table.csv", "--report", "OUT/report.txt"], vec!["table.csv", "report.txt"]),
        ("simulate-mar", vec!["simulate", "--scenario", "mar", "--n", "60", "--rho", "0,0.8", "--reps", "6", "--bootstrap", "100", "--seed", "8", "--out", "OUT/table.csv", "--report", "OUT/report.txt", "--dataset-out", "OUT/d.csv"], vec!["table.csv", "report.txt", "d.csv"]),
        ("test-mcar", vec!["test-mcar", "--input", "mcar.csv", "--bootstrap", "500", "--seed", "11", "--report", "OUT/report.txt"], vec!["report.txt", "report.txt.replicas.csv"]),
        ("test-mar", vec!["test-mar", "--input", "mar.csv", "--covariates", "cov.csv", "--bootstrap", "500", "--seed", "12", "--report", "OUT/report.txt", "--weights-out", "OUT/w.csv"], vec!["report.txt", "report.txt.replicas.csv", "w.csv"]),
        ("cluster", vec!["cluster", "--input", "mar.csv", "--covariates", "cov.csv", "--k", "3", "--seed", "13", "--out", "OUT/assign.csv", "--means-out", "OUT/means.csv", "--report", "OUT/report.txt"], vec!["assign.csv", "means.csv", "report.txt"]),
        ("kde", vec!["kde", "--input", "sample.csv", "--out", "OUT/density.csv", "--report", "OUT/report.txt"], vec!["density.csv", "report.txt"]),
    ];
    let mut failures = Vec::new();
    for (name, args, files) in &commands {
        let mut outputs: Vec<Vec<Vec<u8>>> = Vec::new();
        for threads in ["1", "2", "4"] {
            let sub = format!("{name}-t{threads}");
            std::fs::create_dir_all(d.join(&sub)).unwrap();
            let mut full: Vec<String> = vec!["--threads".into(), threads.into()];
            full.extend(args.iter().map(|a| a.replace("OUT", &sub)));
            let refs: Vec<&str> = full.iter().map(String::as_str).collect();
            if let Err(e) = run_cli(&refs, d) {
                failures.push(e);
                continue;
            }
            outputs.push(files.iter().map(|f| std::fs::read(d.join(&sub).join(f)).unwrap()).collect());
        }
        if outputs.len() != 3 || outputs.windows(2).any(|p| p[0] != p[1]) {
            failures.push(format!("{name} differs across thread counts"));
        }
    }
    let pass = failures.is_empty();
    outcome(
        pass,
        if pass {
            format!("{} commands byte-identical at 1, 2 and 4 threads", commands.len())
        } else {
            failures.join("; ")
        },
    )
}

fn main() {
    let criteria: Vec<(&str, fn() -> Outcome)> = vec![
        ("1 MCAR null calibration (n=50/50/50, 500 reps, B=300)", mcar_null),
        ("2 MCAR power (age shift)", mcar_power),
        ("3 MAR calibration and power (n=100)", mar_calibration_and_power),
        ("4 MMD estimators match naive oracles to 1e-12", oracle_equivalence),
        ("5 Wasserstein metric suite", wasserstein_suite),
        ("6 Wild-bootstrap multiplier process", wild_bootstrap_process),
        ("7 Exact small-sample permutation calibration", exact_small_sample),
        ("8 Clustering trace, move deltas and planted recovery", clustering),
        ("9 IPW total weight with true probabilities", ipw_sanity),
        ("10 CLI determinism across --threads", cli_determinism),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let start = Instant::now();
        let o = f();
        let status = if o.pass { "PASS" } else { "FAIL" };
        if !o.pass {
            failed += 1;
        }
        println!("[PRIMARY] {status} criterion {name}: {} ({:.1}s)", o.detail, start.elapsed().as_secs_f64());
    }
    println!("acceptance: {} passed, {failed} failed", 10 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
