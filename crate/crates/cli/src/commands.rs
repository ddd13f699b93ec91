//! Command implementations behind the CLI subcommands.

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;

use fracfed_core::analysis::audit_decrease;
use fracfed_core::error::Error;
use fracfed_core::federation::{comm_meter, run_federation, AlgorithmCfg, FedConfig};
use fracfed_core::numerics::{derive_stream, frac_factor, gamma, FracConfig};
use fracfed_core::objectives::{grad_check, Objective, ParamVector};
use fracfed_core::optimizers::{run_fosgd, run_sgd, Batcher};
use fracfed_core::partition::{
    heterogeneity_report, load_idx, partition, synth_classification, train_test_split, ClientShard,
    Dataset, PartitionSpec, Scheme, SeverityPreset,
};

use crate::config::{DatasetCfg, ExperimentConfig, ModelKind};
use crate::records::{
    emit_rounds_csv, emit_sweep_csv, RoundRow, RunSummary, Summary, SweepRow,
    PARTITION_HEADER_COMMENT,
};

pub struct Experiment {
    pub train: Arc<Dataset>,
    pub test: Dataset,
    pub shards: Vec<ClientShard>,
    pub objective: Objective,
}

pub fn build_experiment(cfg: &ExperimentConfig) -> Result<Experiment, Error> {
    let full = match &cfg.dataset {
        DatasetCfg::Synth {
            n,
            features,
            classes,
            class_sep,
            data_seed,
        } => synth_classification(*n, *features, *classes, *class_sep, *data_seed)?,
        DatasetCfg::Idx { images, labels } => load_idx(images, labels)?,
    };
    let (train, test) = train_test_split(&full, cfg.test_fraction, cfg.data_seed())?;
    let train = Arc::new(train);
    let shards = partition(&train, &cfg.partition_spec(train.num_classes()))?;
    let objective = match cfg.model {
        ModelKind::LinReg => Objective::linreg(train.clone()),
        ModelKind::LogReg => Objective::logreg(train.clone()),
        ModelKind::Mlp => Objective::mlp(train.clone(), cfg.hidden)?,
    };
    Ok(Experiment {
        train,
        test,
        shards,
        objective,
    })
}

fn run_one(
    exp: &Experiment,
    fed: &FedConfig,
    seed: u64,
) -> Result<(Vec<RoundRow>, RunSummary), Error> {
    let out = run_federation(&exp.objective, &exp.test, &exp.shards, fed, seed)?;
    let algorithm = fed.algorithm.name().to_string();
    let alpha = fed.algorithm.alpha();
    let rows: Vec<RoundRow> = out
        .records
        .iter()
        .map(|r| RoundRow {
            round: r.round,
            algorithm: algorithm.clone(),
            seed,
            alpha,
            train_loss: r.train_loss,
            test_accuracy: r.test_accuracy,
            global_grad_norm: r.global_grad_norm,
            bytes_cumulative: r.bytes_cumulative,
            clipped_steps: r.clipped_steps,
        })
        .collect();

    let d = exp.objective.dim();
    let m = (((fed.client_fraction * fed.num_clients as f64).floor() as usize).max(1))
        .min(fed.num_clients);
    let steady_bytes = comm_meter(&fed.algorithm, fed.comm_mode, 1, m, d).total();
    let final_test_accuracy = match out.records.last() {
        Some(r) => r.test_accuracy,
        None => {
            let test_obj = exp.objective.rebind(Arc::new(exp.test.clone()))?;
            test_obj.accuracy(&out.final_theta)?
        }
    };
    let summary = RunSummary {
        algorithm,
        seed,
        alpha,
        rounds: fed.rounds,
        final_test_accuracy,
        target_accuracy: fed.target_accuracy,
        rounds_to_target: out.target_round.map(|t| t + 1),
        mb_per_round: steady_bytes as f64 / 1e6,
        mb_to_target: out
            .target_round
            .map(|t| out.records[t as usize].bytes_cumulative as f64 / 1e6),
        mb_total: out
            .records
            .last()
            .map(|r| r.bytes_cumulative as f64 / 1e6)
            .unwrap_or(0.0),
    };
    Ok((rows, summary))
}

fn write_meta(
    out_dir: &Path,
    command: &str,
    started: Instant,
    parallel: usize,
) -> Result<(), Error> {
    let meta = serde_json::json!({
        "command": command,
        "parallel": parallel,
        "wall_millis_total": started.elapsed().as_secs_f64() * 1e3,
        "started_unix_ms": std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0),
    });
    std::fs::write(out_dir.join("run_meta.json"), format!("{meta:#}\n"))?;
    Ok(())
}

fn write_partial_marker(out_dir: &Path, rows: &[RoundRow], err: &Error) {
    let _ = std::fs::write(out_dir.join("rounds.csv"), emit_rounds_csv(rows));
    let _ = std::fs::write(
        out_dir.join("partial_results.marker"),
        format!("run aborted: {err}\nrows written: {}\n", rows.len()),
    );
}

/// `fracfed run`: one algorithm across the configured seeds.
pub fn cmd_run(cfg: &ExperimentConfig, out_dir: &Path, parallel: usize) -> Result<(), Error> {
    let started = Instant::now();
    std::fs::create_dir_all(out_dir)?;
    let exp = build_experiment(cfg)?;

    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    for &seed in &cfg.seeds {
        match run_one(&exp, &cfg.fed, seed) {
            Ok((r, s)) => {
                rows.extend(r);
                summaries.push(s);
            }
            Err(e) => {
                write_partial_marker(out_dir, &rows, &e);
                return Err(e);
            }
        }
    }

    std::fs::write(out_dir.join("rounds.csv"), emit_rounds_csv(&rows))?;
    let summary = Summary { runs: summaries };
    std::fs::write(
        out_dir.join("summary.json"),
        format!(
            "{}\n",
            serde_json::to_string_pretty(&summary).expect("summary is serializable")
        ),
    )?;
    write_meta(out_dir, "run", started, parallel)?;
    Ok(())
}

/// `fracfed sweep`: Cartesian product of sweep alphas and seeds, aggregated
/// per alpha.
pub fn cmd_sweep(cfg: &ExperimentConfig, out_dir: &Path, parallel: usize) -> Result<(), Error> {
    let started = Instant::now();
    if cfg.sweep_alphas.is_empty() {
        return Err(Error::Usage(
            "sweep requires a non-empty [sweep] alphas list".into(),
        ));
    }
    if !matches!(cfg.fed.algorithm, AlgorithmCfg::FoFedAvg { .. }) {
        return Err(Error::Usage(
            "sweep varies the fractional order; set [algorithm] name = fofedavg".into(),
        ));
    }
    std::fs::create_dir_all(out_dir)?;
    let exp = build_experiment(cfg)?;

    let mut cells = Vec::new();
    for &alpha in &cfg.sweep_alphas {
        for &seed in &cfg.seeds {
            cells.push((alpha, seed));
        }
    }
    let results: Vec<Result<(Vec<RoundRow>, RunSummary), Error>> = cells
        .par_iter()
        .map(|&(alpha, seed)| {
            let fed = cfg.fed_with_alpha(alpha).map_err(Error::Usage)?;
            run_one(&exp, &fed, seed)
        })
        .collect();

    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    for r in results {
        match r {
            Ok((mut cell_rows, s)) => {
                rows.append(&mut cell_rows);
                summaries.push(s);
            }
            Err(e) => {
                write_partial_marker(out_dir, &rows, &e);
                return Err(e);
            }
        }
    }

    let sweep_rows: Vec<SweepRow> = cfg
        .sweep_alphas
        .iter()
        .map(|&alpha| {
            let finals: Vec<f64> = summaries
                .iter()
                .filter(|s| s.alpha == Some(alpha))
                .map(|s| s.final_test_accuracy)
                .collect();
            // identical runs (e.g. repeated seeds) must aggregate to std 0
            // exactly, without float residue from the mean division
            if finals.iter().all(|a| a.to_bits() == finals[0].to_bits()) {
                return SweepRow {
                    alpha,
                    runs: finals.len(),
                    final_accuracy_mean: finals[0],
                    final_accuracy_std: 0.0,
                };
            }
            let n = finals.len() as f64;
            let mean = finals.iter().sum::<f64>() / n;
            let var = finals.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
            SweepRow {
                alpha,
                runs: finals.len(),
                final_accuracy_mean: mean,
                final_accuracy_std: var.sqrt(),
            }
        })
        .collect();

    std::fs::write(out_dir.join("rounds.csv"), emit_rounds_csv(&rows))?;
    std::fs::write(out_dir.join("sweep.csv"), emit_sweep_csv(&sweep_rows))?;
    std::fs::write(
        out_dir.join("summary.json"),
        format!(
            "{}\n",
            serde_json::to_string_pretty(&Summary { runs: summaries })
                .expect("summary is serializable")
        ),
    )?;
    write_meta(out_dir, "sweep", started, parallel)?;
    Ok(())
}

/// `fracfed partition-stats`: per-client histograms plus pairwise TV
/// distances for the configured dataset/partition.
pub fn cmd_partition_stats(cfg: &ExperimentConfig, out_dir: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(out_dir)?;
    let exp = build_experiment(cfg)?;
    let report = heterogeneity_report(&exp.shards, &exp.train);

    let classes = exp.train.num_classes();
    let mut stats = String::new();
    stats.push_str(PARTITION_HEADER_COMMENT);
    stats.push('\n');
    stats.push_str("client_id,n_k,distinct_classes");
    for c in 0..classes {
        stats.push_str(&format!(",count_{c}"));
    }
    stats.push('\n');
    for h in &report.per_client {
        stats.push_str(&format!(
            "{},{},{}",
            h.client_id,
            h.n_k,
            h.distinct_classes()
        ));
        for c in &h.counts {
            stats.push_str(&format!(",{c}"));
        }
        stats.push('\n');
    }
    std::fs::write(out_dir.join("partition_stats.csv"), stats)?;

    let mut tv = String::new();
    tv.push_str(PARTITION_HEADER_COMMENT);
    tv.push('\n');
    tv.push_str("client_a,client_b,tv\n");
    for (a, b, d) in &report.pairwise_tv {
        tv.push_str(&format!("{a},{b},{d}\n"));
    }
    std::fs::write(out_dir.join("partition_tv.csv"), tv)?;

    let max_distinct = report
        .per_client
        .iter()
        .map(|h| h.distinct_classes())
        .max()
        .unwrap_or(0);
    let summary = serde_json::json!({
        "clients": report.per_client.len(),
        "mean_pairwise_tv": report.mean_pairwise_tv,
        "max_distinct_classes": max_distinct,
    });
    std::fs::write(
        out_dir.join("partition_summary.json"),
        format!("{summary:#}\n"),
    )?;

    match report.mean_pairwise_tv {
        Some(tv) => println!("partition-stats: {} clients, mean pairwise TV {tv:.4}, max classes/client {max_distinct}", report.per_client.len()),
        None => println!("partition-stats: single client, no pairwise distances"),
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// check command: executable invariant suites
// ---------------------------------------------------------------------------

struct Suite {
    name: &'static str,
    run: fn() -> Result<String, String>,
}

// Frozen high-precision oracle values (computed once, externally, at 30
// digits) for the factor (s+delta)^(1-alpha)/Gamma(2-alpha).
const FACTOR_ORACLE: [(f64, f64, f64, f64); 5] = [
    (0.5, 0.1, 3.9, 2.25675833419102514779),
    (0.5, 0.1, 0.0, 0.35682482323055422291),
    (0.5, 0.1, 0.5, 0.87403874447366325643),
    (0.8, 1e-5, 1.0, 1.089126599298465481412355),
    (0.97, 1e-5, 0.25, 0.9753091542323059482366446),
];

fn check_gamma() -> Result<String, String> {
    let closed = [
        (1.0, 1.0),
        (2.0, 1.0),
        (1.5, 0.886226925452758013649083741671),
        (0.6, 1.48919224881281710239433338832),
        (1.2, 0.918168742399760610640951655186),
    ];
    for (x, want) in closed {
        let got = gamma(x).map_err(|e| e.to_string())?;
        let rel = ((got - want) / want).abs();
        if rel > 1e-12 {
            return Err(format!(
                "gamma({x}) = {got}, expected {want} (rel err {rel:e})"
            ));
        }
    }
    for x in [0.6, 0.9, 1.0, 1.3] {
        let lhs = gamma(x + 1.0).map_err(|e| e.to_string())?;
        let rhs = x * gamma(x).map_err(|e| e.to_string())?;
        if ((lhs - rhs) / rhs).abs() > 1e-10 {
            return Err(format!("recurrence failed at x = {x}: {lhs} vs {rhs}"));
        }
    }
    Ok("closed forms and recurrence within tolerance".into())
}

fn check_frac_factor_oracle() -> Result<String, String> {
    for (alpha, delta, s, want) in FACTOR_ORACLE {
        let config = FracConfig::new(alpha, 0.1, delta, None).map_err(|e| e.to_string())?;
        let got = frac_factor(&config, s);
        let rel = ((got - want) / want).abs();
        if rel > 1e-12 {
            return Err(format!(
                "factor(alpha={alpha}, delta={delta}, s={s}) = {got}, expected {want} (rel err {rel:e})"
            ));
        }
    }
    let one = FracConfig::new(1.0, 0.1, 0.3, None).map_err(|e| e.to_string())?;
    if frac_factor(&one, 7.3).to_bits() != 1.0f64.to_bits() {
        return Err("factor at alpha = 1 is not exactly 1.0".into());
    }
    Ok(format!(
        "{} oracle points match to 1e-12",
        FACTOR_ORACLE.len()
    ))
}

fn check_alpha_one_equivalence() -> Result<String, String> {
    let ds = Arc::new(synth_classification(60, 4, 3, 3.0, 51).map_err(|e| e.to_string())?);
    let obj = Objective::logreg(ds.clone());
    let theta0 = ParamVector::zeros(obj.dim());
    let batcher = Batcher::stochastic_over(ds.len(), 8, 7, "batch");
    let mu0 = 0.15;
    let config = FracConfig::new(1.0, mu0, 1e-5, None).map_err(|e| e.to_string())?;
    let frac = run_fosgd(&obj, &theta0, &config, 12, &batcher).map_err(|e| e.to_string())?;
    let plain = run_sgd(&obj, &theta0, mu0, 12, &batcher).map_err(|e| e.to_string())?;
    for (i, (a, b)) in frac.iter().zip(&plain).enumerate() {
        if !a.theta.bits_eq(&b.theta) {
            return Err(format!(
                "alpha=1 trajectory diverged from plain SGD at step {i}"
            ));
        }
    }
    Ok("12-step stochastic trajectory is bit-identical to decaying-rate SGD".into())
}

fn check_sufficient_decrease() -> Result<String, String> {
    let obj = Objective::quadratic(vec![4.0, 1.0]).map_err(|e| e.to_string())?;
    let theta0 = ParamVector::new(vec![1.0, 1.0]).map_err(|e| e.to_string())?;
    let batcher = Batcher::Full { indices: vec![0] };
    for alpha in [0.5, 0.8, 0.97] {
        let config = FracConfig::new(alpha, 1.0, 0.1, Some(0.5)).map_err(|e| e.to_string())?;
        let traj = run_fosgd(&obj, &theta0, &config, 200, &batcher).map_err(|e| e.to_string())?;
        let audits = audit_decrease(&traj, &obj, &config).map_err(|e| e.to_string())?;
        if let Some(bad) = audits.iter().find(|a| !a.clean()) {
            return Err(format!(
                "alpha = {alpha}: violation at t = {} (slack {}, alpha_t {}, consistent {})",
                bad.t, bad.slack, bad.alpha_t, !bad.step_size_inconsistent
            ));
        }
        let min_grad = traj
            .iter()
            .map(|p| p.grad_norm)
            .fold(f64::INFINITY, f64::min);
        if min_grad >= 1e-3 {
            return Err(format!(
                "alpha = {alpha}: grad norm only reached {min_grad}"
            ));
        }
    }

    // gate check: without a cap and with a deliberately large mu0 the audit
    // must flag steps above 2/L
    let config = FracConfig::new(0.97, 3.0, 0.1, None).map_err(|e| e.to_string())?;
    let traj = run_fosgd(&obj, &theta0, &config, 6, &batcher).map_err(|e| e.to_string())?;
    let audits = audit_decrease(&traj, &obj, &config).map_err(|e| e.to_string())?;
    if !audits.iter().any(|a| a.step_bound_violated) {
        return Err("audit failed to flag steps above 2/L in the uncapped run".into());
    }
    Ok("capped runs clean for alpha in {0.5, 0.8, 0.97}; uncapped run flagged".into())
}

fn check_partition_invariants() -> Result<String, String> {
    let ds = synth_classification(1000, 6, 10, 4.0, 61).map_err(|e| e.to_string())?;

    let iid = partition(
        &ds,
        &PartitionSpec {
            scheme: Scheme::Iid,
            k: 7,
            seed: 3,
        },
    )
    .map_err(|e| e.to_string())?;
    let mut seen = vec![false; ds.len()];
    for s in &iid {
        for &i in s.indices() {
            if seen[i] {
                return Err(format!("iid partition assigned index {i} twice"));
            }
            seen[i] = true;
        }
    }
    if !seen.iter().all(|&b| b) {
        return Err("iid partition does not cover the dataset".into());
    }

    let severe =
        partition(&ds, &SeverityPreset::Severe.spec(10, 10, 5)).map_err(|e| e.to_string())?;
    let report = heterogeneity_report(&severe, &ds);
    for h in &report.per_client {
        if h.distinct_classes() > 2 {
            return Err(format!(
                "severe preset: client {} holds {} classes",
                h.client_id,
                h.distinct_classes()
            ));
        }
    }

    let spec01 = PartitionSpec {
        scheme: Scheme::Dirichlet { alpha: 0.1 },
        k: 8,
        seed: 11,
    };
    let spec10 = PartitionSpec {
        scheme: Scheme::Dirichlet { alpha: 10.0 },
        k: 8,
        seed: 11,
    };
    let tv01 = heterogeneity_report(&partition(&ds, &spec01).map_err(|e| e.to_string())?, &ds)
        .mean_pairwise_tv
        .unwrap_or(0.0);
    let tv10 = heterogeneity_report(&partition(&ds, &spec10).map_err(|e| e.to_string())?, &ds)
        .mean_pairwise_tv
        .unwrap_or(0.0);
    if tv01 <= tv10 {
        return Err(format!(
            "dirichlet severity ordering broken: TV(0.1) = {tv01} <= TV(10) = {tv10}"
        ));
    }
    Ok("coverage, class bounds, and Dirichlet severity ordering hold".into())
}

fn check_gradients() -> Result<String, String> {
    let ds = Arc::new(synth_classification(24, 4, 3, 3.0, 71).map_err(|e| e.to_string())?);
    let batch: Vec<usize> = (0..ds.len()).collect();
    let mut worst_logreg = 0.0f64;
    let mut worst_mlp = 0.0f64;
    for point in 0..3 {
        let logreg = Objective::logreg(ds.clone());
        let mut theta = ParamVector::zeros(logreg.dim());
        let mut rng = derive_stream(100 + point, "check.gradpoint", 0).rng();
        for v in theta.values_mut() {
            *v = rand::Rng::random_range(&mut rng, -0.5..0.5);
        }
        let err = grad_check(&logreg, &theta, &batch, 1e-5).map_err(|e| e.to_string())?;
        worst_logreg = worst_logreg.max(err);

        let mlp = Objective::mlp(ds.clone(), 6).map_err(|e| e.to_string())?;
        let theta = mlp.init_params(&derive_stream(200 + point, "check.gradpoint", 0));
        let err = grad_check(&mlp, &theta, &batch, 1e-5).map_err(|e| e.to_string())?;
        worst_mlp = worst_mlp.max(err);
    }
    if worst_logreg > 1e-5 {
        return Err(format!(
            "logreg finite-difference error {worst_logreg:e} exceeds 1e-5"
        ));
    }
    if worst_mlp > 1e-4 {
        return Err(format!(
            "mlp finite-difference error {worst_mlp:e} exceeds 1e-4"
        ));
    }
    Ok(format!(
        "max fd error: logreg {worst_logreg:.2e} (<= 1e-5), mlp {worst_mlp:.2e} (<= 1e-4)"
    ))
}

// Audit table of the capped quadratic runs, one row per fractional step.
fn write_audit_csv(out_dir: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(out_dir)?;
    let obj = Objective::quadratic(vec![4.0, 1.0])?;
    let theta0 = ParamVector::new(vec![1.0, 1.0])?;
    let batcher = Batcher::Full { indices: vec![0] };
    let mut csv = String::from("# fracfed-audit v1\n");
    csv.push_str("alpha,t,f_before,f_after,grad_norm_sq,alpha_t,kappa_t,slack\n");
    for alpha in [0.5, 0.8, 0.97] {
        let config = FracConfig::new(alpha, 1.0, 0.1, Some(0.5))?;
        let traj = run_fosgd(&obj, &theta0, &config, 200, &batcher)?;
        for a in audit_decrease(&traj, &obj, &config)? {
            csv.push_str(&format!(
                "{alpha},{},{},{},{},{},{},{}\n",
                a.t, a.f_before, a.f_after, a.grad_norm_sq, a.alpha_t, a.kappa_t, a.slack
            ));
        }
    }
    std::fs::write(out_dir.join("audit.csv"), csv)?;
    Ok(())
}

/// `fracfed check`: run every invariant suite, print one line per suite,
/// return Err when any fails. With an output directory the decrease-audit
/// table is also written as CSV.
pub fn cmd_check(out_dir: Option<&Path>) -> Result<(), Error> {
    let suites: &[Suite] = &[
        Suite {
            name: "gamma-closed-forms",
            run: check_gamma,
        },
        Suite {
            name: "frac-factor-oracle",
            run: check_frac_factor_oracle,
        },
        Suite {
            name: "alpha-one-equivalence",
            run: check_alpha_one_equivalence,
        },
        Suite {
            name: "sufficient-decrease-audit",
            run: check_sufficient_decrease,
        },
        Suite {
            name: "partition-invariants",
            run: check_partition_invariants,
        },
        Suite {
            name: "gradient-check",
            run: check_gradients,
        },
    ];
    let mut failures = 0;
    for s in suites {
        match (s.run)() {
            Ok(detail) => println!("PASS {} — {detail}", s.name),
            Err(detail) => {
                failures += 1;
                println!("FAIL {} — {detail}", s.name);
            }
        }
    }
    if let Some(dir) = out_dir {
        write_audit_csv(dir)?;
    }
    if failures > 0 {
        return Err(Error::Usage(format!(
            "{failures} invariant suite(s) failed"
        )));
    }
    Ok(())
}
