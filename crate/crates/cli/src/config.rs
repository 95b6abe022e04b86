//! Run configuration: a base tree, an optional preset overlay, a user file
//! overlay, then resolution of seeds and paths.
//!
//! The file format is TOML. Tables merge key by key; arrays and scalars
//! replace. Every section of [`RunConfig`] is present after resolution, so
//! `config.resolved` re-parses to the same value.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tcddpm::dataio::{Recipe, ScalerKind, SourceSpec, SplitConfig, ToyKind};
use tcddpm::diffusion::TrainConfig;
use tcddpm::metrics::MetricConfig;
use tcddpm::schedule::ScheduleConfig;
use tcddpm::unet::UNetConfig;
use tcddpm::utility::UtilityConfig;
use tcddpm::{Error, Result};

pub const PRESETS: [(&str, &str); 4] = [
    ("toy", include_str!("../presets/toy.toml")),
    ("smartfall", include_str!("../presets/smartfall.toml")),
    ("eeg", include_str!("../presets/eeg.toml")),
    ("stick", include_str!("../presets/stick.toml")),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Toy {
        generator: ToyKind,
        windows: usize,
        length: usize,
        channels: usize,
    },
    Csv {
        files: Vec<SourceSpec>,
        channel_columns: Vec<String>,
        #[serde(default = "comma")]
        delimiter: char,
        recipe: Recipe,
        #[serde(default)]
        sampling_rate_hz: Option<f64>,
    },
}

fn comma() -> char {
    ','
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub name: String,
    pub eval_fraction: f64,
    pub scaler: ScalerKind,
    pub source: DataSource,
}

impl DataConfig {
    /// `(channels, window length)` the data will have.
    pub fn dims(&self) -> (usize, usize) {
        match &self.source {
            DataSource::Toy { channels, length, .. } => (*channels, *length),
            DataSource::Csv {
                channel_columns, recipe, ..
            } => (channel_columns.len(), recipe.window_length),
        }
    }

    pub fn split(&self, seed: u64) -> SplitConfig {
        SplitConfig {
            eval_fraction: self.eval_fraction,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateConfig {
    pub count: usize,
    /// Sampling seed; derived from the run seed when absent.
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reference {
    /// Held-out windows only.
    Eval,
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateConfig {
    /// Real windows the synthetic set is compared against.
    pub reference: Reference,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtilitySection {
    pub experiment: UtilityConfig,
    /// Synthetic sequences drawn when the source is a checkpoint.
    pub synth_sequences: usize,
    /// Fixture sizes used when the data source is a toy generator.
    pub toy_subjects: usize,
    pub toy_windows_per_class: usize,
    pub toy_length: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    pub iterations: u64,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub preset: Option<String>,
    pub seed: u64,
    pub data: DataConfig,
    pub schedule: ScheduleConfig,
    pub unet: UNetConfig,
    pub train: TrainConfig,
    pub generate: GenerateConfig,
    pub evaluate: EvaluateConfig,
    pub metrics: MetricConfig,
    pub utility: UtilitySection,
    pub ablation: AblationConfig,
}

impl RunConfig {
    /// Defaults before any preset: shared training settings
    /// and a 3-channel, 240-step model.
    pub fn base() -> Self {
        RunConfig {
            preset: None,
            seed: 0,
            data: DataConfig {
                name: "dataset".into(),
                eval_fraction: 0.2,
                scaler: ScalerKind::MinMax,
                source: DataSource::Csv {
                    files: Vec::new(),
                    channel_columns: vec!["x".into(), "y".into(), "z".into()],
                    delimiter: ',',
                    recipe: Recipe::smartfall(),
                    sampling_rate_hz: None,
                },
            },
            schedule: ScheduleConfig::default(),
            unet: UNetConfig::new(3, 240, 64, vec![1, 2, 4, 8]),
            train: TrainConfig::default(),
            generate: GenerateConfig { count: 1000, seed: None },
            evaluate: EvaluateConfig {
                reference: Reference::Eval,
            },
            metrics: MetricConfig::default(),
            utility: UtilitySection {
                experiment: UtilityConfig::default(),
                synth_sequences: 1000,
                toy_subjects: 10,
                toy_windows_per_class: 40,
                toy_length: 240,
            },
            ablation: AblationConfig {
                iterations: 5000,
                samples: 1000,
            },
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str, origin: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(format!("{origin}: {e}")))
    }

    /// Pin component seeds to the run seed and check cross-section
    /// consistency.
    pub fn resolve(mut self, base_dir: &Path) -> Result<Self> {
        if self.seed > i64::MAX as u64 {
            return Err(Error::config(format!("seed {} exceeds {}", self.seed, i64::MAX)));
        }
        self.train.seed = self.seed;
        self.utility.experiment.seed = self.seed;
        if let DataSource::Csv { files, .. } = &mut self.data.source {
            for f in files.iter_mut() {
                if f.path.is_relative() {
                    f.path = absolute(&base_dir.join(&f.path));
                }
            }
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.unet.validate().map_err(|e| Error::config(format!("unet: {e}")))?;
        self.train.validate().map_err(|e| Error::config(format!("train: {e}")))?;
        self.schedule.build().map_err(|e| Error::config(format!("schedule: {e}")))?;
        self.utility
            .experiment
            .validate()
            .map_err(|e| Error::config(format!("utility.experiment: {e}")))?;
        let (c, l) = self.data.dims();
        if c != self.unet.in_channels {
            return Err(Error::config(format!(
                "unet.in_channels = {} but the data has {c} channels",
                self.unet.in_channels
            )));
        }
        if l != self.unet.seq_len {
            return Err(Error::config(format!(
                "unet.seq_len = {} but data windows have length {l}",
                self.unet.seq_len
            )));
        }
        if !(0.0..1.0).contains(&self.data.eval_fraction) {
            return Err(Error::config("data.eval_fraction must lie in [0, 1)"));
        }
        if self.generate.count == 0 {
            return Err(Error::config("generate.count must be positive"));
        }
        Ok(())
    }
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn parse_table(text: &str, origin: &str) -> Result<toml::Table> {
    text.parse::<toml::Table>()
        .map_err(|e| Error::config(format!("{origin}: {e}")))
}

pub fn preset_text(name: &str) -> Result<&'static str> {
    PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, t)| *t)
        .ok_or_else(|| {
            let known: Vec<&str> = PRESETS.iter().map(|(n, _)| *n).collect();
            Error::config(format!("unknown preset `{name}` (known: {})", known.join(", ")))
        })
}

/// Build a resolved config from an optional preset name, an optional user
/// file (which may itself name a preset) and an optional seed override.
pub fn load(preset: Option<&str>, file: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut tree = toml::Table::try_from(RunConfig::base()).expect("base config is a table");
    let (user, base_dir) = match file {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::config(format!("{}: {e}", p.display())))?;
            let dir = p.parent().map(Path::to_path_buf).unwrap_or_default();
            (Some(parse_table(&text, &p.display().to_string())?), absolute(&dir))
        }
        None => (None, absolute(Path::new("."))),
    };
    let file_preset = user
        .as_ref()
        .and_then(|t| t.get("preset"))
        .and_then(|v| v.as_str())
        .map(str::to_string);
    let preset = preset.map(str::to_string).or(file_preset);
    if let Some(name) = &preset {
        merge(&mut tree, parse_table(preset_text(name)?, &format!("preset {name}"))?);
        tree.insert("preset".into(), toml::Value::String(name.clone()));
    }
    if let Some(u) = user {
        merge(&mut tree, u);
    }
    if let Some(s) = seed {
        let s = i64::try_from(s).map_err(|_| Error::config(format!("seed {s} exceeds {}", i64::MAX)))?;
        tree.insert("seed".into(), toml::Value::Integer(s));
    }
    let origin = file.map_or("config".to_string(), |p| p.display().to_string());
    let cfg: RunConfig = tree
        .try_into()
        .map_err(|e: toml::de::Error| Error::config(format!("{origin}: {e}")))?;
    cfg.resolve(&base_dir)
}
