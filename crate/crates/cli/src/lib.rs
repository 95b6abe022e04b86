//! Command-line driver: configuration, run directories and the commands
//! that tie data preparation, training, sampling and evaluation together.

pub mod ablate;
pub mod cli;
pub mod commands;
pub mod config;
pub mod rundir;

use std::path::{Path, PathBuf};

use tcddpm::{Error, ErrorKind, Result};

use crate::cli::{Cli, Command, GlobalArgs};
use crate::commands::Context;
use crate::rundir::{RunDir, CONFIG_FILE, HASHES_FILE};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

pub fn exit_code(e: &Error) -> i32 {
    match e.kind() {
        ErrorKind::Config => EXIT_CONFIG,
        ErrorKind::Data => EXIT_DATA,
        ErrorKind::Numerical => EXIT_NUMERICAL,
    }
}

fn out_dir(g: &GlobalArgs) -> Result<PathBuf> {
    g.out
        .clone()
        .ok_or_else(|| Error::config("no run directory: pass --out or set TCDDPM_OUT"))
}

/// Config from flags, or the one already stored in the run directory.
pub fn context(g: &GlobalArgs) -> Result<Context> {
    let root = out_dir(g)?;
    let stored = root.join(CONFIG_FILE).exists();
    let cfg = if g.config.is_some() || g.preset.is_some() || (g.run_seed.is_some() && !stored) {
        config::load(g.preset.as_deref(), g.config.as_deref(), g.run_seed)?
    } else if stored {
        let cfg = RunDir::read_config(&root)?;
        if let Some(s) = g.run_seed {
            if s != cfg.seed {
                return Err(Error::config(format!(
                    "run seed {s} differs from the seed {} stored in {}",
                    cfg.seed,
                    root.join(CONFIG_FILE).display()
                )));
            }
        }
        cfg
    } else {
        return Err(Error::config(format!(
            "{} has no {CONFIG_FILE}; pass --preset or --config",
            root.display()
        )));
    };
    Ok(Context {
        run: RunDir::open(&root, &cfg)?,
        cfg,
    })
}

fn rebase(p: &Option<PathBuf>, from: &Path, to: &Path) -> Option<PathBuf> {
    p.as_ref().map(|p| match p.strip_prefix(from) {
        Ok(rel) => to.join(rel),
        Err(_) => p.clone(),
    })
}

/// Point path arguments that lived inside the source run at the new one.
fn rebase_command(cmd: &Command, from: &Path, to: &Path) -> Command {
    match cmd {
        Command::Generate { count, seed, checkpoint } => Command::Generate {
            count: *count,
            seed: *seed,
            checkpoint: rebase(checkpoint, from, to),
        },
        Command::Evaluate { synth } => Command::Evaluate {
            synth: rebase(synth, from, to),
        },
        Command::Utility { synth, checkpoint } => Command::Utility {
            synth: rebase(synth, from, to),
            checkpoint: rebase(checkpoint, from, to),
        },
        Command::Plot { synth } => Command::Plot {
            synth: rebase(synth, from, to),
        },
        other => other.clone(),
    }
}

/// Re-execute `from`'s commands into the `--out` directory and compare
/// every artifact hash. Returns the differing paths.
pub fn replay(from: &Path, g: &GlobalArgs) -> Result<Vec<String>> {
    let root = out_dir(g)?;
    let cfg = RunDir::read_config(from)?;
    let src = RunDir {
        root: from.to_path_buf(),
    };
    let records = src.commands()?;
    let ctx = Context {
        run: RunDir::open(&root, &cfg)?,
        cfg,
    };
    let (from_abs, to_abs) = (absolute(from), absolute(&root));
    for r in &records {
        let cmd = rebase_command(&rebase_command(&r.command, from, &root), &from_abs, &to_abs);
        eprintln!("replay: {}", cmd.name());
        ctx.execute(&cmd)?;
    }
    let want = read_hashes(&src.path(HASHES_FILE))?;
    let got = ctx.run.hashes()?;
    let keys: std::collections::BTreeSet<&String> = want.keys().chain(got.keys()).collect();
    Ok(keys.into_iter().filter(|k| want.get(*k) != got.get(*k)).cloned().collect())
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

fn read_hashes(p: &Path) -> Result<std::collections::BTreeMap<String, String>> {
    let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
    serde_json::from_str(&text).map_err(|e| Error::data(p.display().to_string(), e.to_string()))
}

pub fn run(cli: Cli) -> Result<()> {
    if let Command::Replay { from } = &cli.command {
        let diffs = replay(from, &cli.global)?;
        if diffs.is_empty() {
            println!("replay reproduced every artifact hash");
            return Ok(());
        }
        return Err(Error::Numerical(format!("replay hashes differ for: {}", diffs.join(", "))));
    }
    let ctx = context(&cli.global)?;
    ctx.execute(&cli.command)
}
