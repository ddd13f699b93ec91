//! Acceptance suite: one test per release criterion. Tests serialize on a
//! shared lock so the stated runtime budgets are measured without cross-test
//! contention. Run with `--nocapture` to see the per-criterion PASS lines.

use std::process::Command;
use std::sync::{Arc, Mutex, OnceLock};
use std::time::{Duration, Instant};

use fracfed_core::analysis::audit_decrease;
use fracfed_core::federation::{run_federation, AlgorithmCfg, CommMode, FedConfig, FedRunOutput};
use fracfed_core::numerics::{derive_stream, FracConfig};
use fracfed_core::objectives::{grad_check, Objective, ParamVector};
use fracfed_core::optimizers::{run_fosgd, Batcher};
use fracfed_core::partition::{
    partition, synth_classification, train_test_split, ClientShard, Dataset, PartitionSpec, Scheme,
    SeverityPreset,
};

fn lock() -> std::sync::MutexGuard<'static, ()> {
    static LOCK: OnceLock<Mutex<()>> = OnceLock::new();
    LOCK.get_or_init(|| Mutex::new(()))
        .lock()
        .unwrap_or_else(|p| p.into_inner())
}

fn pass(n: u32, detail: &str) {
    println!("criterion {n} PASS — {detail}");
}

struct Bench {
    test: Dataset,
    shards: Vec<ClientShard>,
    objective: Objective,
}

fn logreg_bench(
    n: usize,
    p: usize,
    classes: usize,
    sep: f64,
    data_seed: u64,
    spec: PartitionSpec,
) -> Bench {
    let full = synth_classification(n, p, classes, sep, data_seed).unwrap();
    let (train, test) = train_test_split(&full, 0.25, data_seed).unwrap();
    let train = Arc::new(train);
    let shards = partition(&train, &spec).unwrap();
    let objective = Objective::logreg(train);
    Bench {
        test,
        shards,
        objective,
    }
}

fn fed_run(bench: &Bench, cfg: &FedConfig, seed: u64) -> FedRunOutput {
    run_federation(&bench.objective, &bench.test, &bench.shards, cfg, seed).unwrap()
}

#[test]
fn criterion_1_alpha_one_reduction() {
    let _g = lock();
    let started = Instant::now();
    let bench = logreg_bench(
        400,
        8,
        4,
        3.0,
        42,
        PartitionSpec {
            scheme: Scheme::Iid,
            k: 4,
            seed: 42,
        },
    );
    let mu0 = 0.1;
    let base = FedConfig {
        algorithm: AlgorithmCfg::FoFedAvg {
            frac: FracConfig::new(1.0, mu0, 1e-5, None).unwrap(),
        },
        num_clients: 4,
        client_fraction: 1.0,
        local_epochs: 2,
        batch_size: 16,
        rounds: 5,
        target_accuracy: None,
        comm_mode: CommMode::ClientCachesPrev,
    };
    let fedavg = FedConfig {
        algorithm: AlgorithmCfg::FedAvg {
            eta: mu0,
            eta_decay: true,
        },
        ..base.clone()
    };
    let seed = 7;
    let a = fed_run(&bench, &base, seed);
    let b = fed_run(&bench, &fedavg, seed);
    assert_eq!(a.round_thetas.len(), 5);
    for (t, (ta, tb)) in a.round_thetas.iter().zip(&b.round_thetas).enumerate() {
        assert!(ta.bits_eq(tb), "global models diverged at round {t}");
    }
    let elapsed = started.elapsed();
    assert!(elapsed < Duration::from_secs(5), "took {elapsed:?}");
    pass(
        1,
        &format!(
            "FOFedAvg(alpha=1) and decaying-rate FedAvg bit-identical over 5 rounds ({elapsed:?})"
        ),
    );
}

#[test]
fn criterion_2_theorem_audit() {
    let _g = lock();
    let started = Instant::now();
    let obj = Objective::quadratic(vec![4.0, 1.0]).unwrap();
    let l = obj.smoothness_constant().unwrap();
    assert_eq!(l, 4.0);
    let cap = 2.0 / l;
    let theta0 = ParamVector::new(vec![1.0, 1.0]).unwrap();
    let batcher = Batcher::Full { indices: vec![0] };
    for alpha in [0.5, 0.8, 0.97] {
        let config = FracConfig::new(alpha, 1.0, 0.1, Some(cap)).unwrap();
        let traj = run_fosgd(&obj, &theta0, &config, 200, &batcher).unwrap();
        let audits = audit_decrease(&traj, &obj, &config).unwrap();
        assert_eq!(audits.len(), 199);
        for a in &audits {
            assert!(
                !a.decrease_violated && !a.step_bound_violated && !a.step_size_inconsistent,
                "alpha={alpha} t={}: {a:?}",
                a.t
            );
        }
        let min_grad = traj
            .iter()
            .map(|p| p.grad_norm)
            .fold(f64::INFINITY, f64::min);
        assert!(min_grad < 1e-3, "alpha={alpha}: min grad norm {min_grad}");
    }
    let elapsed = started.elapsed();
    assert!(elapsed < Duration::from_secs(1), "took {elapsed:?}");
    pass(2, &format!(
        "zero violations at slack 1e-9 and grad norm < 1e-3 for alpha in {{0.5, 0.8, 0.97}} ({elapsed:?})"
    ));
}

#[test]
fn criterion_3_gradient_fidelity() {
    let _g = lock();
    let ds = Arc::new(synth_classification(24, 4, 3, 3.0, 71).unwrap());
    let batch: Vec<usize> = (0..ds.len()).collect();
    let mut worst_logreg = 0.0f64;
    let mut worst_mlp = 0.0f64;
    for point in 0..3u64 {
        let logreg = Objective::logreg(ds.clone());
        let mut theta = ParamVector::zeros(logreg.dim());
        let mut rng = derive_stream(500 + point, "accept.grad", 0).rng();
        for v in theta.values_mut() {
            *v = rand::Rng::random_range(&mut rng, -0.5..0.5);
        }
        worst_logreg = worst_logreg.max(grad_check(&logreg, &theta, &batch, 1e-5).unwrap());

        let mlp = Objective::mlp(ds.clone(), 6).unwrap();
        let theta = mlp.init_params(&derive_stream(600 + point, "accept.grad", 0));
        worst_mlp = worst_mlp.max(grad_check(&mlp, &theta, &batch, 1e-5).unwrap());
    }
    assert!(worst_logreg <= 1e-5, "logreg fd error {worst_logreg:e}");
    assert!(worst_mlp <= 1e-4, "mlp fd error {worst_mlp:e}");
    pass(
        3,
        &format!(
            "max relative fd error: logreg {worst_logreg:.2e} <= 1e-5, mlp {worst_mlp:.2e} <= 1e-4"
        ),
    );
}

#[test]
fn criterion_4_degenerate_federation() {
    let _g = lock();
    let bench = logreg_bench(
        80,
        6,
        3,
        3.0,
        11,
        PartitionSpec {
            scheme: Scheme::Iid,
            k: 1,
            seed: 11,
        },
    );
    let n_k = bench.shards[0].n_k();
    let rounds = 20u64;
    let seed = 5;
    let cfg = FedConfig {
        algorithm: AlgorithmCfg::FoFedAvg {
            frac: FracConfig::new(0.8, 0.05, 1e-5, None).unwrap(),
        },
        num_clients: 1,
        client_fraction: 1.0,
        local_epochs: 1,
        batch_size: n_k,
        rounds,
        target_accuracy: None,
        comm_mode: CommMode::ClientCachesPrev,
    };
    let fed = fed_run(&bench, &cfg, seed);

    let theta0 = bench.objective.init_params(&derive_stream(seed, "init", 0));
    let frac = FracConfig::new(0.8, 0.05, 1e-5, None).unwrap();
    let central = run_fosgd(
        &bench.objective,
        &theta0,
        &frac,
        rounds,
        &Batcher::Full {
            indices: bench.shards[0].indices().to_vec(),
        },
    )
    .unwrap();
    for t in 0..rounds as usize {
        assert!(
            fed.round_thetas[t].bits_eq(&central[t + 1].theta),
            "trajectories diverged at round {t}"
        );
    }
    pass(
        4,
        "K=1/C=1/E=1/B=n federated trajectory equals centralized FOSGD exactly over 20 rounds",
    );
}

#[test]
fn criterion_5_partition_contracts() {
    let _g = lock();
    let ds = synth_classification(1000, 6, 10, 4.0, 61).unwrap();
    let severe = partition(&ds, &SeverityPreset::Severe.spec(10, 10, 5)).unwrap();
    let report = fracfed_core::partition::heterogeneity_report(&severe, &ds);
    let max_classes = report
        .per_client
        .iter()
        .map(|h| h.distinct_classes())
        .max()
        .unwrap();
    assert!(
        max_classes <= 2,
        "severe preset leaks {max_classes} classes to a client"
    );

    let mut wins = 0;
    for seed in 0..10 {
        let tv = |alpha: f64| {
            let shards = partition(
                &ds,
                &PartitionSpec {
                    scheme: Scheme::Dirichlet { alpha },
                    k: 8,
                    seed,
                },
            )
            .unwrap();
            fracfed_core::partition::heterogeneity_report(&shards, &ds)
                .mean_pairwise_tv
                .unwrap()
        };
        if tv(0.1) > tv(10.0) {
            wins += 1;
        }
    }
    assert_eq!(
        wins, 10,
        "Dirichlet(0.1) beat Dirichlet(10) in only {wins}/10 seeds"
    );
    pass(5, &format!(
        "severe preset <= 2 classes/client (max {max_classes}); Dirichlet severity ordering 10/10 seeds"
    ));
}

#[test]
fn criterion_6_directional_noniid_speedup() {
    let _g = lock();
    let started = Instant::now();
    let bench = logreg_bench(
        2000,
        20,
        10,
        4.0,
        42,
        SeverityPreset::Severe.spec(10, 10, 42),
    );
    let rate = 0.2;
    let mk = |algorithm: AlgorithmCfg| FedConfig {
        algorithm,
        num_clients: 10,
        client_fraction: 0.2,
        local_epochs: 3,
        batch_size: 16,
        rounds: 60,
        target_accuracy: Some(0.6),
        comm_mode: CommMode::ClientCachesPrev,
    };
    let fo = |alpha: f64| {
        mk(AlgorithmCfg::FoFedAvg {
            frac: FracConfig::new(alpha, rate, 1e-5, None).unwrap(),
        })
    };
    let fa = mk(AlgorithmCfg::FedAvg {
        eta: rate,
        eta_decay: false,
    });
    let rounds_to = |cfg: &FedConfig, seed: u64| -> Option<u64> {
        fed_run(&bench, cfg, seed).target_round.map(|t| t + 1)
    };

    // tune alpha on the validation seed (ties break toward the first entry)
    let validation_seed = 100;
    let grid = [0.6, 0.97];
    let tuned = grid
        .iter()
        .map(|&a| (a, rounds_to(&fo(a), validation_seed).unwrap_or(u64::MAX)))
        .min_by_key(|(_, r)| *r)
        .map(|(a, _)| a)
        .unwrap();

    let eval_seeds = [1u64, 2, 3];
    let mut fo_rounds = Vec::new();
    let mut fa_rounds = Vec::new();
    for &seed in &eval_seeds {
        fo_rounds.push(rounds_to(&fo(tuned), seed).expect("fofedavg missed the target"));
        fa_rounds.push(rounds_to(&fa, seed).expect("fedavg missed the target"));
    }
    let wins = fo_rounds
        .iter()
        .zip(&fa_rounds)
        .filter(|(f, a)| f <= a)
        .count();
    let fo_mean = fo_rounds.iter().sum::<u64>() as f64 / 3.0;
    let fa_mean = fa_rounds.iter().sum::<u64>() as f64 / 3.0;
    assert!(wins >= 2, "fofedavg {fo_rounds:?} vs fedavg {fa_rounds:?}");
    assert!(
        fo_mean < fa_mean,
        "mean rounds-to-target {fo_mean} not below fedavg {fa_mean}"
    );
    let elapsed = started.elapsed();
    assert!(elapsed < Duration::from_secs(120), "took {elapsed:?}");
    pass(6, &format!(
        "alpha={tuned} rounds-to-0.6 {fo_rounds:?} vs fedavg {fa_rounds:?}; means {fo_mean:.2} < {fa_mean:.2} ({elapsed:?})"
    ));
}

#[test]
fn criterion_7_communication_accounting() {
    let _g = lock();
    let bench = logreg_bench(
        200,
        6,
        4,
        4.0,
        13,
        PartitionSpec {
            scheme: Scheme::Iid,
            k: 5,
            seed: 13,
        },
    );
    let d = bench.objective.dim();
    let rounds = 7u64;
    let m = 2usize; // floor(0.4 * 5)
    let base = FedConfig {
        algorithm: AlgorithmCfg::FedAvg {
            eta: 0.3,
            eta_decay: false,
        },
        num_clients: 5,
        client_fraction: 0.4,
        local_epochs: 1,
        batch_size: 16,
        rounds,
        target_accuracy: Some(0.6),
        comm_mode: CommMode::ClientCachesPrev,
    };
    let out = fed_run(&bench, &base, 3);
    let per_round = (2 * m * d * 4) as u64;
    assert_eq!(
        out.records.last().unwrap().bytes_cumulative,
        rounds * per_round,
        "fedavg cumulative bytes"
    );

    let fo_broadcast = FedConfig {
        algorithm: AlgorithmCfg::FoFedAvg {
            frac: FracConfig::new(0.8, 0.3, 1e-5, None).unwrap(),
        },
        comm_mode: CommMode::BroadcastPrev,
        ..base.clone()
    };
    let out_b = fed_run(&bench, &fo_broadcast, 3);
    let round0 = (2 * m * d * 4) as u64;
    let steady = (3 * m * d * 4) as u64;
    assert_eq!(
        out_b.records.last().unwrap().bytes_cumulative,
        round0 + (rounds - 1) * steady,
        "broadcast-prev cumulative bytes"
    );

    // target proportionality on the meter's own numbers (default mode)
    let fo_cached = FedConfig {
        algorithm: AlgorithmCfg::FoFedAvg {
            frac: FracConfig::new(0.8, 0.3, 1e-5, None).unwrap(),
        },
        ..base
    };
    let out_c = fed_run(&bench, &fo_cached, 3);
    let t_cross = out_c.target_round.expect("target 0.6 should be reached");
    let rounds_to_target = t_cross + 1;
    let mb_to_target = out_c.records[t_cross as usize].bytes_cumulative as f64 / 1e6;
    let mb_per_round = per_round as f64 / 1e6;
    assert!(
        (mb_to_target - rounds_to_target as f64 * mb_per_round).abs() < 1e-12,
        "MB-to-target {mb_to_target} != rounds {rounds_to_target} x per-round {mb_per_round}"
    );
    pass(7, &format!(
        "cumulative = closed form in both modes; MB-to-target = {rounds_to_target} x {mb_per_round} MB exactly"
    ));
}

const DETERMINISM_CONFIG: &str = "\
[dataset]
kind = synth
n = 300
features = 8
classes = 4
class_sep = 3.0
data_seed = 9
test_fraction = 0.25

[partition]
scheme = dirichlet
dirichlet_alpha = 0.5
clients = 5

[model]
kind = logreg

[algorithm]
name = fofedavg
rounds = 5
client_fraction = 0.6
local_epochs = 2
batch_size = 16
alpha = 0.8
mu0 = 0.1
target_accuracy = 0.8

[sweep]
seeds = 1, 2

[output]
directory = unused
";

#[test]
fn criterion_8_parallel_determinism() {
    let _g = lock();
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("exp.ini");
    std::fs::write(&cfg_path, DETERMINISM_CONFIG).unwrap();
    let bin = env!("CARGO_BIN_EXE_fracfed");

    for (out, parallel) in [("out1", "1"), ("out4", "4")] {
        let status = Command::new(bin)
            .args([
                "run",
                "--config",
                cfg_path.to_str().unwrap(),
                "--out",
                dir.path().join(out).to_str().unwrap(),
                "--parallel",
                parallel,
            ])
            .status()
            .unwrap();
        assert!(status.success(), "run --parallel {parallel} failed");
    }
    let rounds1 = std::fs::read(dir.path().join("out1/rounds.csv")).unwrap();
    let rounds4 = std::fs::read(dir.path().join("out4/rounds.csv")).unwrap();
    assert_eq!(
        rounds1, rounds4,
        "rounds.csv differs between --parallel 1 and 4"
    );
    let sum1 = std::fs::read(dir.path().join("out1/summary.json")).unwrap();
    let sum4 = std::fs::read(dir.path().join("out4/summary.json")).unwrap();
    assert_eq!(
        sum1, sum4,
        "summary.json differs between --parallel 1 and 4"
    );
    pass(
        8,
        "rounds.csv and summary.json byte-identical across --parallel 1 and --parallel 4",
    );
}

#[test]
fn criterion_9_invariant_suite_and_mutation() {
    let _g = lock();
    let bin = env!("CARGO_BIN_EXE_fracfed");
    let clean = Command::new(bin).arg("check").output().unwrap();
    assert!(
        clean.status.success(),
        "check failed on a pristine build:\n{}",
        String::from_utf8_lossy(&clean.stdout)
    );
    let stdout = String::from_utf8_lossy(&clean.stdout);
    assert!(stdout.lines().filter(|l| l.starts_with("PASS")).count() >= 6);

    let faulted = Command::new(bin)
        .arg("check")
        .env("FRACFED_FAULT", "skip-gamma-div")
        .output()
        .unwrap();
    assert!(
        !faulted.status.success(),
        "check passed despite the injected factor fault"
    );
    let fault_out = String::from_utf8_lossy(&faulted.stdout);
    assert!(
        fault_out.contains("FAIL"),
        "faulted check printed no FAIL line:\n{fault_out}"
    );
    pass(
        9,
        "check exits 0 pristine and nonzero under FRACFED_FAULT=skip-gamma-div",
    );
}
