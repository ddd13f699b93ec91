//! `fracfed` — declarative federated-optimization experiments.
//!
//! Subcommands: run | sweep | check | partition-stats. Exit codes: 0 success,
//! 1 run or check failure, 2 configuration error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fracfed_cli::{commands, config};

#[derive(Parser)]
#[command(name = "fracfed", version, about = "federated optimization simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Thread pool size for client updates and sweep cells.
    #[arg(long, global = true, default_value_t = 1)]
    parallel: usize,

    /// Output directory; overrides FRACFED_OUT and the config file.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Replace the configured seed list with this single seed.
    #[arg(long, global = true)]
    seed_override: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Execute the configured experiment across its seeds.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Cartesian sweep over [sweep] alphas x seeds.
    Sweep {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the executable invariant suites.
    Check,
    /// Emit per-client heterogeneity reports for the configured partition.
    PartitionStats {
        #[arg(long)]
        config: PathBuf,
    },
}

fn load_config(path: &std::path::Path, cli: &Cli) -> Result<config::ExperimentConfig, ExitCode> {
    match config::parse_config(path) {
        Ok(mut cfg) => {
            if let Some(seed) = cli.seed_override {
                cfg.seeds = vec![seed];
            }
            Ok(cfg)
        }
        Err(errors) => {
            eprintln!("config errors in {}:", path.display());
            for e in errors {
                eprintln!("  - {e}");
            }
            Err(ExitCode::from(2))
        }
    }
}

fn out_dir(cli: &Cli, cfg: &config::ExperimentConfig) -> PathBuf {
    if let Some(out) = &cli.out {
        return out.clone();
    }
    if let Ok(out) = std::env::var("FRACFED_OUT") {
        if !out.is_empty() {
            return PathBuf::from(out);
        }
    }
    cfg.out_dir.clone()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.parallel.max(1))
        .build_global()
    {
        eprintln!("failed to size the thread pool: {e}");
        return ExitCode::from(1);
    }

    let result = match &cli.command {
        Command::Run { config } => match load_config(config, &cli) {
            Ok(cfg) => commands::cmd_run(&cfg, &out_dir(&cli, &cfg), cli.parallel),
            Err(code) => return code,
        },
        Command::Sweep { config } => match load_config(config, &cli) {
            Ok(cfg) => commands::cmd_sweep(&cfg, &out_dir(&cli, &cfg), cli.parallel),
            Err(code) => return code,
        },
        Command::Check => {
            // audit table lands next to other outputs only when a
            // destination was named explicitly
            let audit_dir = cli.out.clone().or_else(|| {
                std::env::var("FRACFED_OUT")
                    .ok()
                    .filter(|s| !s.is_empty())
                    .map(PathBuf::from)
            });
            commands::cmd_check(audit_dir.as_deref())
        }
        Command::PartitionStats { config } => match load_config(config, &cli) {
            Ok(cfg) => commands::cmd_partition_stats(&cfg, &out_dir(&cli, &cfg)),
            Err(code) => return code,
        },
    };

    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
