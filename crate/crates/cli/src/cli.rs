//! Command-line surface.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

#[derive(Debug, Parser)]
#[command(name = "tcddpm", version, about = "Diffusion-based multivariate time-series synthesis")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Debug, Args)]
pub struct GlobalArgs {
    /// Run directory. Created on first use; later commands reuse its
    /// config.resolved.
    #[arg(long, short, global = true, env = "TCDDPM_OUT")]
    pub out: Option<PathBuf>,
    /// Config file (TOML). May name a preset with `preset = "..."`.
    #[arg(long, short, global = true)]
    pub config: Option<PathBuf>,
    /// Built-in preset: toy, smartfall, eeg or stick.
    #[arg(long, global = true)]
    pub preset: Option<String>,
    /// Run seed; every component seed derives from it.
    #[arg(long = "run-seed", global = true, env = "TCDDPM_SEED")]
    pub run_seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum Command {
    /// Read CSV files (or a toy generator) into a manifest and window store.
    Ingest,
    /// Train the denoiser on the ingested windows.
    Train {
        /// Continue from the newest checkpoint in the run directory.
        #[arg(long)]
        #[serde(default)]
        resume: bool,
    },
    /// Sample sequences from a checkpoint.
    Generate {
        #[arg(long)]
        #[serde(default)]
        count: Option<usize>,
        /// Sampling seed.
        #[arg(long)]
        #[serde(default)]
        seed: Option<u64>,
        /// Defaults to checkpoints/last.tckp.
        #[arg(long)]
        #[serde(default)]
        checkpoint: Option<PathBuf>,
    },
    /// Score synthetic windows against the real data.
    Evaluate {
        /// Window store of synthetic sequences; defaults to samples/windows.tcws.
        #[arg(long)]
        #[serde(default)]
        synth: Option<PathBuf>,
    },
    /// Fall-detection experiment with and without synthetic falls.
    Utility {
        /// Window store of synthetic fall sequences.
        #[arg(long, conflicts_with = "checkpoint")]
        #[serde(default)]
        synth: Option<PathBuf>,
        /// Checkpoint to draw synthetic falls from.
        #[arg(long)]
        #[serde(default)]
        checkpoint: Option<PathBuf>,
    },
    /// Train and score the four component configurations under one budget.
    Ablate {
        #[arg(long)]
        #[serde(default)]
        iterations: Option<u64>,
    },
    /// Kernel density curves of real and synthetic values.
    Plot {
        #[arg(long)]
        #[serde(default)]
        synth: Option<PathBuf>,
    },
    /// Re-run every recorded command of a run directory into --out and
    /// compare artifact hashes.
    #[serde(skip)]
    Replay {
        /// Source run directory.
        #[arg(long)]
        from: PathBuf,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Ingest => "ingest",
            Command::Train { .. } => "train",
            Command::Generate { .. } => "generate",
            Command::Evaluate { .. } => "evaluate",
            Command::Utility { .. } => "utility",
            Command::Ablate { .. } => "ablate",
            Command::Plot { .. } => "plot",
            Command::Replay { .. } => "replay",
        }
    }
}
