//! `fedrcl` — run federated-training experiments and compare their logs.
//!
//! Flags mirror config-file keys and win over them (flags > file > defaults),
//! so a full experiment needs no file at all:
//!
//!   fedrcl run --dataset synthetic --clients 10 --alpha 0.1 --loss rcl \
//!              --rounds 60 --out runs/rcl-a01
//!   fedrcl compare runs/*/metrics.jsonl

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use fedrcl_core::engine::ServerOptKind;
use fedrcl_core::experiment::{
    compare_runs, run_experiment, DatasetKind, ExperimentConfig, SchemeKind,
};
use fedrcl_core::losses::LossMode;

#[derive(Parser)]
#[command(name = "fedrcl", version, about = "Deterministic federated-learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write config.toml / metrics.jsonl / summary.json
    Run(Box<RunArgs>),
    /// Summarize metrics.jsonl logs into one CSV table (stdout or --out)
    Compare(CompareArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum DatasetArg {
    Synthetic,
    Cifar10,
    Cifar100,
}

#[derive(Clone, Copy, ValueEnum)]
enum LossArg {
    Ce,
    #[value(alias = "ce+scl")]
    Scl,
    #[value(alias = "ce+rcl")]
    Rcl,
    #[value(alias = "ce+prox")]
    Prox,
}

#[derive(Clone, Copy, ValueEnum)]
enum ServerArg {
    Fedavg,
    Fedavgm,
    Fedadam,
}

#[derive(Args)]
struct RunArgs {
    /// TOML experiment config; flags below override its values
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    dataset: Option<DatasetArg>,
    /// Directory with CIFAR binary batches (cifar10/cifar100 only)
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    clients: Option<usize>,
    /// Fraction of clients sampled per round
    #[arg(long)]
    participation: Option<f64>,
    /// Dirichlet concentration; selects the dirichlet partition scheme
    #[arg(long, conflicts_with = "gamma")]
    alpha: Option<f64>,
    /// Shards per client; selects the quantity partition scheme
    #[arg(long)]
    gamma: Option<usize>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    local_epochs: Option<usize>,
    /// Local objective: ce, scl, rcl, or prox (all on top of cross-entropy)
    #[arg(long, value_enum)]
    loss: Option<LossArg>,
    /// Divergence-penalty weight (rcl)
    #[arg(long)]
    beta: Option<f64>,
    /// Relaxation threshold (rcl)
    #[arg(long)]
    lambda: Option<f64>,
    /// Contrastive temperature
    #[arg(long)]
    tau: Option<f64>,
    /// Comma-separated 1-based tap levels for the contrastive term
    #[arg(long, value_delimiter = ',')]
    levels: Option<Vec<usize>>,
    #[arg(long, value_enum)]
    server_opt: Option<ServerArg>,
    /// Output directory (config echo, metrics, summary)
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    eval_every: Option<usize>,
    /// Train the per-round client cohort on a thread pool
    /// (FEDRCL_MAX_THREADS caps the width; results are identical either way)
    #[arg(long)]
    parallel: bool,
}

#[derive(Args)]
struct CompareArgs {
    /// metrics.jsonl paths, one per run
    #[arg(required = true)]
    logs: Vec<PathBuf>,
    /// Write the CSV here instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
}

fn resolve_config(args: &RunArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::from_path(path)
            .with_context(|| format!("reading config {}", path.display()))?,
        None => ExperimentConfig::parse("[dataset]\nkind = \"synthetic\"\n")?,
    };
    if let Some(kind) = args.dataset {
        cfg.dataset.kind = match kind {
            DatasetArg::Synthetic => DatasetKind::Synthetic,
            DatasetArg::Cifar10 => DatasetKind::Cifar10,
            DatasetArg::Cifar100 => DatasetKind::Cifar100,
        };
    }
    if let Some(dir) = &args.data_dir {
        cfg.dataset.data_dir = Some(dir.clone());
    }
    if let Some(seed) = args.seed {
        cfg.run.seed = seed;
    }
    if let Some(clients) = args.clients {
        cfg.partition.clients = clients;
    }
    if let Some(rho) = args.participation {
        cfg.train.participation = rho;
    }
    if let Some(alpha) = args.alpha {
        cfg.partition.scheme = SchemeKind::Dirichlet;
        cfg.partition.alpha = Some(alpha);
        cfg.partition.gamma = None;
    }
    if let Some(gamma) = args.gamma {
        cfg.partition.scheme = SchemeKind::Quantity;
        cfg.partition.gamma = Some(gamma);
        cfg.partition.alpha = None;
    }
    if let Some(rounds) = args.rounds {
        cfg.train.rounds = rounds;
    }
    if let Some(epochs) = args.local_epochs {
        cfg.train.local_epochs = epochs;
    }
    if let Some(loss) = args.loss {
        cfg.loss.mode = match loss {
            LossArg::Ce => LossMode::Ce,
            LossArg::Scl => LossMode::CeScl,
            LossArg::Rcl => LossMode::CeRcl,
            LossArg::Prox => LossMode::CeProx,
        };
    }
    if let Some(beta) = args.beta {
        cfg.loss.beta = beta;
    }
    if let Some(lambda) = args.lambda {
        cfg.loss.lambda = lambda;
    }
    if let Some(tau) = args.tau {
        cfg.loss.tau = tau;
    }
    if let Some(levels) = &args.levels {
        cfg.loss.levels = levels.clone();
    }
    if let Some(opt) = args.server_opt {
        cfg.server.optimizer = match opt {
            ServerArg::Fedavg => ServerOptKind::FedAvg,
            ServerArg::Fedavgm => ServerOptKind::FedAvgM,
            ServerArg::Fedadam => ServerOptKind::FedAdam,
        };
    }
    if let Some(out) = &args.out {
        cfg.run.out_dir = out.clone();
    }
    if let Some(every) = args.eval_every {
        cfg.run.eval_every = every;
    }
    if args.parallel {
        cfg.run.parallel = true;
    }
    Ok(cfg)
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run(args) => {
            let cfg = resolve_config(&args)?;
            let outcome = run_experiment(&cfg).context("experiment failed")?;
            let s = &outcome.summary;
            println!(
                "final accuracy {:.4} at round {} (best {:.4} at round {}); \
                 results in {}",
                s.final_accuracy,
                s.final_round,
                s.best_accuracy,
                s.best_round,
                outcome.out_dir.display()
            );
        }
        Command::Compare(args) => {
            let table = compare_runs(&args.logs)?;
            match &args.out {
                Some(path) => std::fs::write(path, &table)
                    .with_context(|| format!("writing {}", path.display()))?,
                None => print!("{table}"),
            }
        }
    }
    Ok(())
}
