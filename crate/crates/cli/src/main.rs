//! `csta`: batch driver for dataset generation, cross-validated training,
//! evaluation, summarization and MAC counting.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use csta::metrics::Protocol;

use crate::config::RunConfig;

#[derive(Parser)]
#[command(name = "csta", version, about = "CNN-based spatiotemporal attention for video summarization")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dataset directory.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed for generation and for the cross-validation protocol.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for cross-validation splits.
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen {
        #[arg(long)]
        videos: Option<usize>,
        /// Feature dimension.
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        min_frames: Option<usize>,
        #[arg(long)]
        max_frames: Option<usize>,
        #[arg(long)]
        noise: Option<f32>,
    },
    /// Cross-validated training; writes reports, curves and checkpoints.
    Train {
        #[arg(long)]
        folds: Option<usize>,
        #[arg(long)]
        repeats: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, value_parser = parse_protocol)]
        protocol: Option<Protocol>,
        /// Also train one model on every video and save it as `final.ckpt`.
        #[arg(long)]
        final_model: bool,
    },
    /// Score a checkpoint on every video of a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_parser = parse_protocol)]
        protocol: Option<Protocol>,
    },
    /// Produce keyshot summaries with a checkpoint.
    Summarize {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Summary length as a fraction of the video.
        #[arg(long)]
        budget: Option<f64>,
    },
    /// Count multiply-accumulates of the configured model.
    Macs {
        /// Read the model configuration from this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        frames: Option<usize>,
    },
}

fn parse_protocol(s: &str) -> Result<Protocol, String> {
    match s {
        "score" => Ok(Protocol::Score),
        "summary" => Ok(Protocol::Summary),
        _ => Err(format!("unknown protocol `{s}` (expected `score` or `summary`)")),
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = RunConfig::load(cli.common.config.as_deref())?;
    let c = cli.common;
    if c.data.is_some() {
        cfg.data = c.data;
    }
    if c.out.is_some() {
        cfg.out = c.out;
    }
    if c.seed.is_some() {
        cfg.seed = c.seed;
    }
    if let Some(j) = c.jobs {
        cfg.cv.jobs = j;
    }
    match cli.command {
        Command::Gen {
            videos,
            dim,
            min_frames,
            max_frames,
            noise,
        } => {
            set(&mut cfg.gen.videos, videos);
            set(&mut cfg.gen.feature_dim, dim);
            set(&mut cfg.gen.min_frames, min_frames);
            set(&mut cfg.gen.max_frames, max_frames);
            set(&mut cfg.gen.noise, noise);
            cfg.resolve();
            commands::gen(&cfg)
        }
        Command::Train {
            folds,
            repeats,
            epochs,
            protocol,
            final_model,
        } => {
            set(&mut cfg.cv.folds, folds);
            set(&mut cfg.cv.repeats, repeats);
            set(&mut cfg.train.epochs, epochs);
            set(&mut cfg.eval.protocol, protocol);
            cfg.resolve();
            commands::train(&mut cfg, final_model)
        }
        Command::Eval { checkpoint, protocol } => {
            set(&mut cfg.eval.protocol, protocol);
            cfg.resolve();
            commands::eval(&cfg, &checkpoint)
        }
        Command::Summarize { checkpoint, budget } => {
            set(&mut cfg.eval.budget_ratio, budget);
            cfg.resolve();
            commands::summarize(&cfg, &checkpoint)
        }
        Command::Macs { checkpoint, frames } => {
            set(&mut cfg.macs.frames, frames);
            cfg.resolve();
            commands::macs(&cfg, checkpoint.as_deref())
        }
    }
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CSTA_LOG", "warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
