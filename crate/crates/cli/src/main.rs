//! `ube`: simulate, train, transfer and evaluate voxel-embedding encoders.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ube_core::{Error, Result};

use crate::config::RunConfig;

#[derive(Parser)]
#[command(name = "ube", version, about = "Voxel-embedding image-to-brain encoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; defaults to the number of logical cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Dataset manifest; repeat for several datasets.
    #[arg(long = "manifest", global = true)]
    manifests: Vec<PathBuf>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    lr: Option<f64>,
    #[arg(long, global = true)]
    freeze_level_projections: bool,
    #[arg(long, global = true)]
    dense_adam: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with known voxel functionality.
    Simulate,
    /// Precompute backbone feature files for image stimuli.
    Features,
    /// Train on every subject of the given manifests.
    Train,
    /// Fit embeddings for new subjects against a frozen checkpoint.
    Transfer {
        /// Training stimuli kept per new subject.
        #[arg(long)]
        examples: Option<usize>,
    },
    /// Held-out metrics for every subject.
    Eval,
    /// Stimulus identification from measured responses.
    Retrieve {
        /// Candidate set size.
        #[arg(long)]
        n: Option<usize>,
    },
    /// k-means over pooled voxel embeddings.
    Cluster {
        #[arg(long)]
        k: Option<usize>,
    },
    /// Summarize one or more report.json files.
    Report {
        inputs: Vec<PathBuf>,
    },
}

fn resolve(common: &Common, command: &Command) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if common.seed.is_some() {
        cfg.seed = common.seed;
    }
    if let Some(o) = &common.out {
        cfg.out = o.clone();
    }
    if !common.manifests.is_empty() {
        cfg.manifests = common.manifests.clone();
    }
    if common.checkpoint.is_some() {
        cfg.checkpoint = common.checkpoint.clone();
    }
    if let Some(e) = common.epochs {
        cfg.train.epochs = e;
    }
    if let Some(lr) = common.lr {
        cfg.train.lr = lr;
    }
    cfg.train.freeze_level_projections |= common.freeze_level_projections;
    cfg.train.dense_adam |= common.dense_adam;
    match command {
        Command::Transfer { examples: Some(n) } => cfg.transfer.examples = Some(*n),
        Command::Retrieve { n: Some(n) } => cfg.eval.retrieval_n = *n,
        Command::Cluster { k: Some(k) } => cfg.cluster.k = *k,
        _ => {}
    }
    cfg.finalize()
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve(&cli.common, &cli.command)?;
    if let Some(n) = cli.common.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    log::debug!("run config hash {}", cfg.hash());
    match &cli.command {
        Command::Simulate => commands::simulate(&cfg),
        Command::Features => commands::features(&cfg),
        Command::Train => commands::train_cmd(&cfg),
        Command::Transfer { .. } => commands::transfer(&cfg),
        Command::Eval => commands::eval(&cfg),
        Command::Retrieve { .. } => commands::retrieve(&cfg),
        Command::Cluster { .. } => commands::cluster(&cfg),
        Command::Report { inputs } => commands::report(&cfg, inputs),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("UBE_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
