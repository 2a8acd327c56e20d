//! `fedbeam` — scenario generation, partitioning, protocol runs and reports.
//!
//! Exit codes: 0 success, 1 configuration/input error, 2 runtime divergence.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedbeam_core::config::ExperimentConfig;
use fedbeam_core::error::Error;
use fedbeam_core::harness;

#[derive(Parser)]
#[command(name = "fedbeam", version, about = "Federated multi-modal beam selection at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Experiment configuration (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the config's seed list with a single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output path/directory (defaults to config, then $FEDBEAM_OUT, then ./runs).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scenario dataset.
    Gen(ConfigArgs),
    /// Build a partition manifest and imbalance report for a dataset.
    Partition {
        #[command(flatten)]
        common: ConfigArgs,
        /// Dataset file produced by `gen` (defaults to the config's dataset).
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Run the (protocol × seed) experiment grid.
    Train {
        #[command(flatten)]
        common: ConfigArgs,
        /// Restrict to these protocols (overrides the config list).
        #[arg(long)]
        protocol: Vec<String>,
        /// Force fully deterministic single-thread execution.
        #[arg(long)]
        sequential: bool,
    },
    /// Aggregate finished runs into a comparison table and plot series.
    Report {
        /// Run directories produced by `train`.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Output directory for report.csv / series.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(args: &ConfigArgs) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seeds = vec![seed];
        cfg.scenario.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.out_dir = Some(out.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Gen(args) => {
            let cfg = load_config(&args)?;
            let out = args
                .out
                .clone()
                .unwrap_or_else(|| cfg.resolve_out_dir().join("dataset.json"));
            let summary = harness::cmd_gen(&cfg, &out)?;
            println!(
                "wrote {} — vehicles {} beams {} samples {} zeta {:.4} epsilon {:.4}",
                summary.path.display(),
                summary.vehicles,
                summary.beams,
                summary.samples,
                summary.zeta,
                summary.epsilon
            );
        }
        Command::Partition { common, dataset } => {
            let cfg = load_config(&common)?;
            let dataset = dataset
                .or_else(|| cfg.dataset.clone())
                .ok_or_else(|| Error::config("partition needs --dataset or config dataset"))?;
            let out = common.out.clone().unwrap_or_else(|| cfg.resolve_out_dir());
            let seed = cfg.seeds[0];
            let (partition, report) = harness::cmd_partition(&dataset, &cfg, seed, &out)?;
            println!(
                "partition {} vehicles, {} samples — zeta {:.4} epsilon {:.4}",
                partition.vehicle_count(),
                partition.total_samples(),
                report.zeta,
                report.epsilon
            );
            for (v, k) in report.kappa.iter().enumerate() {
                println!("  vehicle {v}: kappa GPS {:.3} RGB {:.3} LiDAR {:.3}", k[0], k[1], k[2]);
            }
        }
        Command::Train { common, protocol, sequential } => {
            let mut cfg = load_config(&common)?;
            if !protocol.is_empty() {
                cfg.protocols = protocol;
                cfg.validate()?;
            }
            if sequential {
                cfg.rounds.sequential = true;
            }
            let out = cfg.resolve_out_dir();
            let summaries = harness::cmd_train(&cfg, &out)?;
            println!("{:<8} {:>6} {:>8} {:>8} {:>10}", "proto", "seed", "Com", "Acc", "Var");
            for s in &summaries {
                println!(
                    "{:<8} {:>6} {:>8.4} {:>8.4} {:>10.6}",
                    s.protocol, s.seed, s.com, s.acc, s.var
                );
            }
            println!("outputs under {}", out.display());
        }
        Command::Report { runs, out } => {
            let out = out.unwrap_or_else(|| {
                std::env::var("FEDBEAM_OUT")
                    .map(PathBuf::from)
                    .unwrap_or_else(|_| PathBuf::from("runs"))
                    .join("report")
            });
            let rows = harness::cmd_report(&runs, &out)?;
            println!(
                "{:<8} {:>5} {:>9} {:>9} {:>9} {:>10} {:>9}",
                "proto", "runs", "Acc", "±", "Com", "Var", "overhead"
            );
            for r in &rows {
                println!(
                    "{:<8} {:>5} {:>9.4} {:>9.4} {:>9.4} {:>10.6} {:>9.4}",
                    r.protocol, r.runs, r.acc_mean, r.acc_std, r.com_mean, r.var_mean, r.overhead_ratio
                );
            }
            println!("report under {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let code = match err.downcast_ref::<Error>() {
                Some(Error::Diverged { .. }) => 2,
                _ => 1,
            };
            ExitCode::from(code)
        }
    }
}
