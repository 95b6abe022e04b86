//! Run directory layout and bookkeeping.
//!
//! ```text
//! <run>/
//!   config.resolved     resolved TOML config
//!   commands.json       commands that completed, in order
//!   hashes.json         sha256 of every artifact below
//!   INCOMPLETE          present while a command runs or after it failed
//!   data/               manifest.json + windows.tcws
//!   checkpoints/        iter_NNNNNN.tckp, last.tckp, ablation/<config>/
//!   samples/            windows.tcws, samples.json, csv/, ablation/
//!   reports/            metrics, utility and ablation reports
//!   plots/              KDE curves and SVGs
//!   logs/               train_loss.csv, run.log
//! ```

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tcddpm::ndgrad::checkpoint::sha256_hex;
use tcddpm::{Error, Result};

use crate::cli::Command;
use crate::config::RunConfig;

pub const CONFIG_FILE: &str = "config.resolved";
pub const COMMANDS_FILE: &str = "commands.json";
pub const HASHES_FILE: &str = "hashes.json";
pub const INCOMPLETE_FILE: &str = "INCOMPLETE";
pub const SUBDIRS: [&str; 6] = ["data", "checkpoints", "samples", "reports", "plots", "logs"];
/// Directories whose files are hashed.
const HASHED: [&str; 5] = ["data", "checkpoints", "samples", "reports", "plots"];

#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommandRecord {
    pub command: Command,
}

fn io<P: AsRef<Path>>(p: P) -> impl FnOnce(std::io::Error) -> Error {
    move |e| Error::io(p.as_ref(), e)
}

impl RunDir {
    /// Open or create `root` with `cfg`. An existing directory must hold the
    /// same resolved config.
    pub fn open(root: &Path, cfg: &RunConfig) -> Result<Self> {
        let dir = RunDir {
            root: root.to_path_buf(),
        };
        let cpath = dir.path(CONFIG_FILE);
        if cpath.exists() {
            let existing = Self::read_config(root)?;
            if &existing != cfg {
                return Err(Error::config(format!(
                    "{} holds a different config; use a new --out or drop --config/--preset",
                    cpath.display()
                )));
            }
        } else {
            std::fs::create_dir_all(root).map_err(io(root))?;
            std::fs::write(&cpath, cfg.to_toml()).map_err(io(&cpath))?;
        }
        for d in SUBDIRS {
            let p = dir.path(d);
            std::fs::create_dir_all(&p).map_err(io(&p))?;
        }
        Ok(dir)
    }

    pub fn read_config(root: &Path) -> Result<RunConfig> {
        let cpath = root.join(CONFIG_FILE);
        let text = std::fs::read_to_string(&cpath).map_err(io(&cpath))?;
        RunConfig::from_toml(&text, &cpath.display().to_string())
    }

    pub fn path(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.root.join(rel)
    }

    pub fn begin(&self, name: &str) -> Result<()> {
        let p = self.path(INCOMPLETE_FILE);
        std::fs::write(&p, format!("{name}\n")).map_err(io(&p))?;
        self.log(&format!("begin {name}"))
    }

    /// Record a finished command, refresh hashes and clear the marker.
    pub fn finish(&self, cmd: &Command) -> Result<()> {
        let mut cmds = self.commands()?;
        cmds.push(CommandRecord { command: cmd.clone() });
        let p = self.path(COMMANDS_FILE);
        std::fs::write(&p, serde_json::to_string_pretty(&cmds).expect("commands serialize")).map_err(io(&p))?;
        self.write_hashes()?;
        self.log(&format!("end {}", cmd.name()))?;
        let m = self.path(INCOMPLETE_FILE);
        if m.exists() {
            std::fs::remove_file(&m).map_err(io(&m))?;
        }
        Ok(())
    }

    pub fn is_incomplete(&self) -> bool {
        self.path(INCOMPLETE_FILE).exists()
    }

    pub fn commands(&self) -> Result<Vec<CommandRecord>> {
        let p = self.path(COMMANDS_FILE);
        if !p.exists() {
            return Ok(Vec::new());
        }
        let text = std::fs::read_to_string(&p).map_err(io(&p))?;
        serde_json::from_str(&text).map_err(|e| Error::data(p.display().to_string(), e.to_string()))
    }

    /// Relative path to sha256 for every artifact file.
    pub fn hashes(&self) -> Result<BTreeMap<String, String>> {
        let mut out = BTreeMap::new();
        let cfg = self.path(CONFIG_FILE);
        out.insert(CONFIG_FILE.to_string(), sha256_hex(&std::fs::read(&cfg).map_err(io(&cfg))?));
        for d in HASHED {
            let mut stack = vec![self.path(d)];
            while let Some(dir) = stack.pop() {
                if !dir.exists() {
                    continue;
                }
                for entry in std::fs::read_dir(&dir).map_err(io(&dir))? {
                    let p = entry.map_err(io(&dir))?.path();
                    if p.is_dir() {
                        stack.push(p);
                    } else {
                        let rel = p.strip_prefix(&self.root).expect("under root");
                        let key = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
                        out.insert(key, sha256_hex(&std::fs::read(&p).map_err(io(&p))?));
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn write_hashes(&self) -> Result<()> {
        let p = self.path(HASHES_FILE);
        let h = self.hashes()?;
        std::fs::write(&p, serde_json::to_string_pretty(&h).expect("hashes serialize")).map_err(io(&p))
    }

    pub fn log(&self, line: &str) -> Result<()> {
        let p = self.path("logs/run.log");
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&p)
            .map_err(io(&p))?;
        writeln!(f, "{line}").map_err(io(&p))
    }
}
