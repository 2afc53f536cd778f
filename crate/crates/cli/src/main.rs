mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tgnet_core::{Error, Result};

use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "tgnet", version, about = "Grid demand forecasting with graph networks and temporal embeddings")]
struct Cli {
    /// Run configuration (JSON). Flags given on the command line take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for training or generation.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Rasterize a timestamp,lat,lon,kind CSV onto the configured grid.
    Ingest {
        logs: Option<PathBuf>,
        /// One ISO date per line.
        #[arg(long)]
        holidays: Option<PathBuf>,
    },
    /// Generate a synthetic dataset with ground-truth labels.
    Synth {
        #[arg(long)]
        preset: Option<String>,
        /// SynthConfig JSON; overrides the preset and the config's `synth` block.
        #[arg(long)]
        synth_config: Option<PathBuf>,
        /// Skip writing logs.csv.
        #[arg(long)]
        no_logs: bool,
    },
    /// Train a model and write model.tgck and history.csv.
    Train {
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long)]
        max_epochs: Option<usize>,
    },
    /// Score a checkpoint on the test split and write report.json.
    Eval {
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        k: Option<f64>,
        #[arg(long, value_delimiter = ',')]
        quantiles: Option<Vec<f64>>,
    },
    /// Write the learned embedding of every calendar context to tge_vectors.csv.
    ExportTge {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train and evaluate over several seeds and write mean and spread to repro.json.
    Repro {
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        n_seeds: usize,
        #[arg(long)]
        max_epochs: Option<usize>,
    },
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::InvalidSpec(_) | Error::BatchTooSmall { .. } => 2,
        Error::Diverged { .. } | Error::Numerical(_) => 4,
        _ => 3,
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    let out_dir = cli.out_dir;
    let data_dir = |flag: Option<PathBuf>, cfg: &RunConfig| {
        flag.or_else(|| cfg.paths.data_dir.clone())
            .unwrap_or_else(|| out_dir.clone())
    };
    match cli.command {
        Command::Ingest { logs, holidays } => commands::ingest(&cfg, logs.as_deref(), holidays.as_deref(), &out_dir),
        Command::Synth {
            preset,
            synth_config,
            no_logs,
        } => commands::synth(
            &cfg,
            preset.as_deref(),
            synth_config.as_deref(),
            cli.seed,
            !no_logs,
            &out_dir,
        ),
        Command::Train { data_dir: d, max_epochs } => {
            if let Some(n) = max_epochs {
                cfg.train.max_epochs = n;
            }
            cfg.validate()?;
            commands::train_cmd(&cfg, &data_dir(d, &cfg), &out_dir)
        }
        Command::Eval {
            data_dir: d,
            checkpoint,
            k,
            quantiles,
        } => {
            if let Some(k) = k {
                cfg.eval.k = k;
            }
            if let Some(q) = quantiles {
                cfg.eval.quantiles = q;
            }
            cfg.validate()?;
            let ckpt = commands::checkpoint_path(&cfg, checkpoint, &out_dir);
            commands::eval_cmd(&cfg, &data_dir(d, &cfg), &ckpt, &out_dir)
        }
        Command::ExportTge { checkpoint } => {
            let ckpt = commands::checkpoint_path(&cfg, checkpoint, &out_dir);
            commands::export_tge(&ckpt, &out_dir)
        }
        Command::Repro {
            data_dir: d,
            n_seeds,
            max_epochs,
        } => {
            if let Some(n) = max_epochs {
                cfg.train.max_epochs = n;
            }
            cfg.validate()?;
            let seed = cfg.train.seed;
            commands::repro(&cfg, &data_dir(d, &cfg), n_seeds, seed, &out_dir)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
