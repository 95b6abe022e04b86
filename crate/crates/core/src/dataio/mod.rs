//! CSV ingestion, preparation recipes, normalization and dataset manifests.

pub mod resample;
pub mod scaler;
pub mod store;
pub mod toy;

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndgrad::checkpoint::sha256_hex;
use crate::ndgrad::Tensor;
pub use resample::{downsample, take_middle, take_tail};
pub use scaler::{Scaler, ScalerKind};
pub use store::WindowStore;
pub use toy::ToyKind;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const STORE_FILE: &str = "windows.tcws";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WindowPolicy {
    Nonoverlap,
    Overlap { step: usize },
}

impl WindowPolicy {
    /// Number of windows cut from `rows` samples.
    pub fn count(&self, rows: usize, window: usize) -> usize {
        if window == 0 || rows < window {
            return 0;
        }
        match *self {
            WindowPolicy::Nonoverlap => rows / window,
            WindowPolicy::Overlap { step } => (rows - window) / step.max(1) + 1,
        }
    }

    fn step(&self, window: usize) -> usize {
        match *self {
            WindowPolicy::Nonoverlap => window,
            WindowPolicy::Overlap { step } => step.max(1),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Resample {
    pub from_hz: f64,
    pub to_hz: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "length", rename_all = "snake_case")]
pub enum Crop {
    Middle(usize),
    Tail(usize),
}

/// Per-file preparation: optional resampling, then an optional crop, then
/// windowing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Recipe {
    pub window_length: usize,
    pub policy: WindowPolicy,
    #[serde(default)]
    pub resample: Option<Resample>,
    #[serde(default)]
    pub crop: Option<Crop>,
    #[serde(default)]
    pub skip_short: bool,
}

impl Recipe {
    pub fn windows(window_length: usize) -> Self {
        Recipe {
            window_length,
            policy: WindowPolicy::Nonoverlap,
            resample: None,
            crop: None,
            skip_short: false,
        }
    }

    /// Accelerometer fall recordings: one 240-point window per file.
    pub fn smartfall() -> Self {
        Self::windows(240)
    }

    /// Scalp EEG: 256 Hz down to 100 Hz, middle 900 points, windows of 128.
    pub fn eeg() -> Self {
        Recipe {
            resample: Some(Resample {
                from_hz: 256.0,
                to_hz: 100.0,
            }),
            crop: Some(Crop::Middle(900)),
            ..Self::windows(128)
        }
    }

    /// Stick balancing: the final 2,576 points as one window.
    pub fn stick() -> Self {
        Recipe {
            crop: Some(Crop::Tail(2576)),
            ..Self::windows(2576)
        }
    }

    /// Classifier windows of 128 with a step of 10.
    pub fn utility() -> Self {
        Recipe {
            policy: WindowPolicy::Overlap { step: 10 },
            ..Self::windows(128)
        }
    }

    /// Apply resampling and cropping to one channel.
    pub fn prepare(&self, series: &[f64]) -> Result<Vec<f64>> {
        let s = match self.resample {
            Some(r) => downsample(series, r.from_hz, r.to_hz)?,
            None => series.to_vec(),
        };
        match self.crop {
            Some(Crop::Middle(n)) => take_middle(&s, n),
            Some(Crop::Tail(n)) => take_tail(&s, n),
            None => Ok(s),
        }
    }
}

/// Cut `[C, rows]` channel series into windows laid out `[n, C, window]`.
pub fn window_series(channels: &[Vec<f64>], window: usize, policy: WindowPolicy) -> Vec<f32> {
    let rows = channels.first().map_or(0, Vec::len);
    let n = policy.count(rows, window);
    let step = policy.step(window);
    let mut out = Vec::with_capacity(n * channels.len() * window);
    for k in 0..n {
        let start = k * step;
        for ch in channels {
            out.extend(ch[start..start + window].iter().map(|&v| v as f32));
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub eval_fraction: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            eval_fraction: 0.2,
            seed: 0,
        }
    }
}

impl SplitConfig {
    /// Random per-window assignment with `round(n * eval_fraction)` eval
    /// windows, keeping at least one training window.
    pub fn assign(&self, n: usize) -> Vec<Split> {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(self.seed));
        let n_eval = ((n as f64 * self.eval_fraction).round() as usize).min(n.saturating_sub(1));
        let mut out = vec![Split::Train; n];
        for &i in &idx[..n_eval] {
            out[i] = Split::Eval;
        }
        out
    }
}

/// Where to read a CSV and whom it belongs to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceSpec {
    pub path: PathBuf,
    #[serde(default)]
    pub subject_id: Option<String>,
    #[serde(default)]
    pub label: Option<String>,
}

impl SourceSpec {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        SourceSpec {
            path: path.into(),
            subject_id: None,
            label: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceFile {
    pub path: String,
    pub sha256: String,
    pub rows: usize,
    pub windows: usize,
    pub subject_id: Option<String>,
    pub label: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub source_files: Vec<SourceFile>,
    pub channel_names: Vec<String>,
    pub window_length: usize,
    pub window_policy: WindowPolicy,
    pub recipe: Option<Recipe>,
    pub scaler: Scaler,
    pub split: Vec<Split>,
    /// Index into `source_files` for every window.
    pub window_source: Vec<usize>,
    pub sampling_rate_hz: Option<f64>,
    pub store_file: String,
    pub store_sha256: String,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl DatasetManifest {
    pub fn num_windows(&self) -> usize {
        self.split.len()
    }

    pub fn channels(&self) -> usize {
        self.channel_names.len()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    /// Hash of the serialized manifest; covers the window store via its hash.
    pub fn hash(&self) -> String {
        sha256_hex(self.to_json().as_bytes())
    }
}

/// A `[B, C, L]` batch and whether it is in normalized units.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeriesBatch {
    pub values: Tensor<f32>,
    pub normalized: bool,
    /// Values that left `[-1, 1]` during min-max scaling.
    pub out_of_range: usize,
}

impl TimeSeriesBatch {
    pub fn raw(values: Tensor<f32>) -> Self {
        TimeSeriesBatch {
            values,
            normalized: false,
            out_of_range: 0,
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.values.shape();
        (s[0], s[1], s[2])
    }

    pub fn normalize(mut self, scaler: &Scaler) -> Result<Self> {
        if self.normalized {
            return Ok(self);
        }
        let (_, c, l) = self.dims();
        self.out_of_range = scaler.normalize(self.values.data_mut(), c, l)?;
        self.normalized = true;
        Ok(self)
    }

    pub fn denormalize(mut self, scaler: &Scaler) -> Result<Self> {
        if !self.normalized {
            return Ok(self);
        }
        let (_, c, l) = self.dims();
        scaler.denormalize(self.values.data_mut(), c, l)?;
        self.normalized = false;
        self.out_of_range = 0;
        Ok(self)
    }

    pub fn to_store(&self) -> WindowStore {
        let (b, c, l) = self.dims();
        WindowStore {
            shape: [b, c, l],
            values: self.values.data().to_vec(),
        }
    }
}

/// Manifest plus its raw (unnormalized) windows.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub store: WindowStore,
}

/// Everything [`Dataset::assemble`] needs besides the windows.
#[derive(Clone, Debug)]
pub struct DatasetMeta {
    pub name: String,
    pub channel_names: Vec<String>,
    pub sources: Vec<SourceFile>,
    pub window_source: Vec<usize>,
    pub policy: WindowPolicy,
    pub recipe: Option<Recipe>,
    pub sampling_rate_hz: Option<f64>,
    pub warnings: Vec<String>,
}

impl Dataset {
    /// Assign splits, fit the scaler on training windows and hash the store.
    pub fn assemble(meta: DatasetMeta, store: WindowStore, split: SplitConfig, scaler: ScalerKind) -> Result<Self> {
        let [n, c, l] = store.shape;
        if n == 0 {
            return Err(Error::data(meta.name, "no windows produced"));
        }
        if c != meta.channel_names.len() || meta.window_source.len() != n {
            return Err(Error::shape(
                "dataset",
                format!(
                    "store {:?} vs {} channel names and {} window sources",
                    store.shape,
                    meta.channel_names.len(),
                    meta.window_source.len()
                ),
            ));
        }
        if let Some(i) = store.values.iter().position(|v| !v.is_finite()) {
            let w = i / (c * l);
            let src = meta.sources.get(meta.window_source[w]).map_or("?", |s| s.path.as_str());
            return Err(Error::data(src.to_string(), format!("non-finite value in window {w}")));
        }
        let splits = split.assign(n);
        let train: Vec<f32> = (0..n)
            .filter(|&i| splits[i] == Split::Train)
            .flat_map(|i| store.window(i).iter().copied())
            .collect();
        let scaler = Scaler::fit(scaler, &train, c, l)?;
        let manifest = DatasetManifest {
            name: meta.name,
            source_files: meta.sources,
            channel_names: meta.channel_names,
            window_length: l,
            window_policy: meta.policy,
            recipe: meta.recipe,
            scaler,
            split: splits,
            window_source: meta.window_source,
            sampling_rate_hz: meta.sampling_rate_hz,
            store_file: STORE_FILE.to_string(),
            store_sha256: sha256_hex(&store.to_bytes()),
            warnings: meta.warnings,
        };
        Ok(Dataset { manifest, store })
    }

    /// Seeded synthetic dataset with a 20% eval split and min-max scaling.
    pub fn toy(kind: ToyKind, n: usize, length: usize, channels: usize, seed: u64) -> Result<Self> {
        let split = SplitConfig { seed, ..Default::default() };
        Self::toy_with(kind, [n, channels, length], seed, split, ScalerKind::MinMax)
    }

    /// Seeded synthetic dataset of shape `[n, channels, length]`.
    pub fn toy_with(kind: ToyKind, shape: [usize; 3], seed: u64, split: SplitConfig, scaler: ScalerKind) -> Result<Self> {
        let [n, channels, length] = shape;
        let values = toy::generate(kind, n, length, channels, seed)?;
        let name = format!("toy-{}", serde_json::to_value(kind).unwrap().as_str().unwrap());
        let meta = DatasetMeta {
            name: name.clone(),
            channel_names: (0..channels).map(|i| format!("ch{i}")).collect(),
            sources: vec![SourceFile {
                path: format!("{name}:seed={seed}"),
                sha256: sha256_hex(&WindowStore::new([n, channels, length], values.clone())?.to_bytes()),
                rows: n * length,
                windows: n,
                subject_id: None,
                label: None,
            }],
            window_source: vec![0; n],
            policy: WindowPolicy::Nonoverlap,
            recipe: None,
            sampling_rate_hz: None,
            warnings: Vec::new(),
        };
        Self::assemble(meta, WindowStore::new([n, channels, length], values)?, split, scaler)
    }

    pub fn shape(&self) -> [usize; 3] {
        self.store.shape
    }

    pub fn indices(&self, split: Option<Split>) -> Vec<usize> {
        (0..self.store.len())
            .filter(|&i| split.is_none_or(|s| self.manifest.split[i] == s))
            .collect()
    }

    pub fn select(&self, indices: &[usize]) -> TimeSeriesBatch {
        let [_, c, l] = self.store.shape;
        let data: Vec<f32> = indices.iter().flat_map(|&i| self.store.window(i).iter().copied()).collect();
        TimeSeriesBatch::raw(Tensor::new(vec![indices.len(), c, l], data).expect("window shape"))
    }

    /// Raw windows of a split (all windows for `None`).
    pub fn raw(&self, split: Option<Split>) -> TimeSeriesBatch {
        self.select(&self.indices(split))
    }

    /// Normalized windows of a split.
    pub fn normalized(&self, split: Option<Split>) -> Result<TimeSeriesBatch> {
        self.raw(split).normalize(&self.manifest.scaler)
    }

    pub fn source_of(&self, window: usize) -> &SourceFile {
        &self.manifest.source_files[self.manifest.window_source[window]]
    }

    /// Write `manifest.json` and the window store into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.store.save(&dir.join(&self.manifest.store_file))?;
        let p = dir.join(MANIFEST_FILE);
        std::fs::write(&p, self.manifest.to_json()).map_err(|e| Error::io(&p, e))
    }

    /// Load from a directory or a manifest path, verifying the store hash.
    pub fn load(path: &Path) -> Result<Self> {
        let (dir, mpath) = if path.is_dir() {
            (path.to_path_buf(), path.join(MANIFEST_FILE))
        } else {
            (path.parent().unwrap_or(Path::new(".")).to_path_buf(), path.to_path_buf())
        };
        let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| Error::data(mpath.display().to_string(), e.to_string()))?;
        let spath = dir.join(&manifest.store_file);
        let bytes = std::fs::read(&spath).map_err(|e| Error::io(&spath, e))?;
        if sha256_hex(&bytes) != manifest.store_sha256 {
            return Err(Error::data(
                spath.display().to_string(),
                "window store hash does not match the manifest",
            ));
        }
        let store = WindowStore::from_bytes(&bytes)?;
        if store.shape[0] != manifest.num_windows()
            || store.shape[1] != manifest.channels()
            || store.shape[2] != manifest.window_length
        {
            return Err(Error::data(
                spath.display().to_string(),
                format!("store shape {:?} disagrees with the manifest", store.shape),
            ));
        }
        Ok(Dataset { manifest, store })
    }
}

#[derive(Clone, Debug)]
pub struct IngestOptions {
    pub name: String,
    pub channel_columns: Vec<String>,
    pub recipe: Recipe,
    pub delimiter: u8,
    pub split: SplitConfig,
    pub scaler: ScalerKind,
    /// Rate of the raw files, if known.
    pub sampling_rate_hz: Option<f64>,
}

/// Read the named numeric columns of a CSV with a header row.
pub fn read_csv_columns(path: &Path, columns: &[String], delimiter: u8) -> Result<Vec<Vec<f64>>> {
    let name = path.display().to_string();
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::data(&name, e.to_string()))?;
    let headers = rdr.headers().map_err(|e| Error::data(&name, e.to_string()))?.clone();
    let idx: Vec<usize> = columns
        .iter()
        .map(|c| {
            headers
                .iter()
                .position(|h| h.trim() == c)
                .ok_or_else(|| Error::data(&name, format!("missing column `{c}`")))
        })
        .collect::<Result<_>>()?;
    let mut out = vec![Vec::new(); columns.len()];
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::data(&name, e.to_string()))?;
        for (k, &i) in idx.iter().enumerate() {
            let cell = rec.get(i).unwrap_or("").trim();
            let v: f64 = cell.parse().map_err(|_| {
                Error::data(
                    &name,
                    format!("non-numeric cell `{cell}` in column `{}` at data row {}", columns[k], row + 1),
                )
            })?;
            out[k].push(v);
        }
    }
    Ok(out)
}

/// Parse, prepare and window every file, then assemble the dataset.
pub fn ingest_csv(sources: &[SourceSpec], opts: &IngestOptions) -> Result<Dataset> {
    if opts.channel_columns.is_empty() {
        return Err(Error::config("no channel columns given"));
    }
    let l = opts.recipe.window_length;
    if l == 0 {
        return Err(Error::config("window_length must be positive"));
    }
    let mut files = Vec::new();
    let mut window_source = Vec::new();
    let mut values = Vec::new();
    let mut warnings = Vec::new();
    for spec in sources {
        let name = spec.path.display().to_string();
        let bytes = std::fs::read(&spec.path).map_err(|e| Error::io(&spec.path, e))?;
        let cols = read_csv_columns(&spec.path, &opts.channel_columns, opts.delimiter)?;
        let rows = cols[0].len();
        let prepared: Result<Vec<Vec<f64>>> = cols.iter().map(|c| opts.recipe.prepare(c)).collect();
        let prepared = match prepared {
            Ok(p) if p[0].len() >= l => p,
            other => {
                let detail = match other {
                    Err(e) => e.to_string(),
                    Ok(p) => format!("{} points after preparation, window needs {l}", p[0].len()),
                };
                if opts.recipe.skip_short {
                    warnings.push(format!("skipped short file {name}: {detail}"));
                    continue;
                }
                return Err(Error::data(name, format!("file too short: {detail}")));
            }
        };
        let w = window_series(&prepared, l, opts.recipe.policy);
        let n = w.len() / (l * cols.len());
        window_source.extend(std::iter::repeat_n(files.len(), n));
        values.extend(w);
        files.push(SourceFile {
            path: name,
            sha256: sha256_hex(&bytes),
            rows,
            windows: n,
            subject_id: spec.subject_id.clone(),
            label: spec.label.clone(),
        });
    }
    let c = opts.channel_columns.len();
    let n = window_source.len();
    let rate = match (opts.recipe.resample, opts.sampling_rate_hz) {
        (Some(r), _) => Some(r.to_hz),
        (None, r) => r,
    };
    let meta = DatasetMeta {
        name: opts.name.clone(),
        channel_names: opts.channel_columns.clone(),
        sources: files,
        window_source,
        policy: opts.recipe.policy,
        recipe: Some(opts.recipe.clone()),
        sampling_rate_hz: rate,
        warnings,
    };
    Dataset::assemble(meta, WindowStore::new([n, c, l], values)?, opts.split, opts.scaler)
}

/// Write one CSV per sequence (`seq_00000.csv`, ...) with a header of
/// channel names and one row per time step.
pub fn export_csv(dir: &Path, batch: &TimeSeriesBatch, channel_names: &[String]) -> Result<Vec<PathBuf>> {
    let (b, c, l) = batch.dims();
    if channel_names.len() != c {
        return Err(Error::shape(
            "export_csv",
            format!("{} channel names for {c} channels", channel_names.len()),
        ));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let data = batch.values.data();
    let mut paths = Vec::with_capacity(b);
    for i in 0..b {
        let p = dir.join(format!("seq_{i:05}.csv"));
        let mut w = csv::Writer::from_path(&p).map_err(|e| Error::data(p.display().to_string(), e.to_string()))?;
        let io = |e: csv::Error| Error::data(p.display().to_string(), e.to_string());
        w.write_record(channel_names).map_err(io)?;
        for t in 0..l {
            let row: Vec<String> = (0..c).map(|ch| data[(i * c + ch) * l + t].to_string()).collect();
            w.write_record(&row).map_err(io)?;
        }
        w.flush().map_err(|e| Error::io(&p, e))?;
        paths.push(p);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn write_csv(dir: &Path, name: &str, rows: usize) -> PathBuf {
        let p = dir.join(name);
        let mut s = String::from("time,x,y\n");
        for i in 0..rows {
            s.push_str(&format!("{i},{},{}\n", i as f64 * 0.5, -(i as f64)));
        }
        std::fs::write(&p, s).unwrap();
        p
    }

    fn opts(recipe: Recipe) -> IngestOptions {
        IngestOptions {
            name: "t".into(),
            channel_columns: vec!["x".into(), "y".into()],
            recipe,
            delimiter: b',',
            split: SplitConfig::default(),
            scaler: ScalerKind::MinMax,
            sampling_rate_hz: None,
        }
    }

    #[test]
    fn window_counts() {
        let d = tempfile::tempdir().unwrap();
        let p = write_csv(d.path(), "a.csv", 900);
        let ds = ingest_csv(&[SourceSpec::new(&p)], &opts(Recipe::windows(128))).unwrap();
        assert_eq!(ds.shape(), [7, 2, 128]);
        // last window ends at row 895; rows 896..900 are dropped
        assert_eq!(*ds.store.window(6).last().unwrap(), -895.0);

        let p = write_csv(d.path(), "b.csv", 240);
        let ds = ingest_csv(&[SourceSpec::new(&p)], &opts(Recipe::smartfall())).unwrap();
        assert_eq!(ds.shape()[0], 1);
    }

    #[test]
    fn short_files() {
        let d = tempfile::tempdir().unwrap();
        let short = write_csv(d.path(), "s.csv", 100);
        let long = write_csv(d.path(), "l.csv", 300);
        let err = ingest_csv(&[SourceSpec::new(&short)], &opts(Recipe::windows(128))).unwrap_err();
        assert!(err.to_string().contains("s.csv"), "{err}");
        let mut r = Recipe::windows(128);
        r.skip_short = true;
        let ds = ingest_csv(&[SourceSpec::new(&short), SourceSpec::new(&long)], &opts(r)).unwrap();
        assert_eq!(ds.shape()[0], 2);
        assert_eq!(ds.manifest.warnings.len(), 1);
    }

    #[test]
    fn bad_columns_and_cells() {
        let d = tempfile::tempdir().unwrap();
        let p = write_csv(d.path(), "a.csv", 10);
        let mut o = opts(Recipe::windows(4));
        o.channel_columns = vec!["z".into()];
        assert!(ingest_csv(&[SourceSpec::new(&p)], &o).unwrap_err().to_string().contains("`z`"));
        let q = d.path().join("bad.csv");
        std::fs::write(&q, "x,y\n1,2\nfoo,3\n").unwrap();
        let e = read_csv_columns(&q, &["x".into()], b',').unwrap_err().to_string();
        assert!(e.contains("foo") && e.contains("row 2"), "{e}");
    }

    #[test]
    fn eeg_recipe_arithmetic() {
        let r = Recipe::eeg();
        let x: Vec<f64> = (0..2304).map(|i| (i as f64 * 0.01).sin()).collect();
        let p = r.prepare(&x).unwrap();
        assert_eq!(p.len(), 900);
        assert_eq!(WindowPolicy::Nonoverlap.count(900, 128), 7);
    }

    #[test]
    fn overlap_count() {
        let chans = vec![(0..300).map(|v| v as f64).collect::<Vec<_>>()];
        let w = window_series(&chans, 128, WindowPolicy::Overlap { step: 10 });
        assert_eq!(w.len() / 128, (300 - 128) / 10 + 1);
        assert_eq!(w[128], 10.0);
    }

    #[test]
    fn scaler_uses_train_windows_only() {
        let ds = Dataset::toy(ToyKind::Arma, 50, 16, 1, 4).unwrap();
        let train = ds.raw(Some(Split::Train));
        let max = train.values.data().iter().fold(f32::MIN, |m, &v| m.max(v));
        assert_eq!(ds.manifest.scaler.stats[0].1, max as f64);
        assert_eq!(ds.indices(Some(Split::Eval)).len(), 10);
        let n = ds.normalized(Some(Split::Train)).unwrap();
        assert_eq!(n.out_of_range, 0);
    }

    #[test]
    fn save_load_and_hashes() {
        let d = tempfile::tempdir().unwrap();
        let a = Dataset::toy(ToyKind::Sines, 8, 16, 2, 1).unwrap();
        let b = Dataset::toy(ToyKind::Sines, 8, 16, 2, 1).unwrap();
        let c = Dataset::toy(ToyKind::Sines, 8, 16, 2, 2).unwrap();
        assert_eq!(a.manifest.hash(), b.manifest.hash());
        assert_ne!(a.manifest.hash(), c.manifest.hash());
        a.save(d.path()).unwrap();
        assert_eq!(Dataset::load(d.path()).unwrap(), a);
        // corrupt the store
        let sp = d.path().join(STORE_FILE);
        let mut bytes = std::fs::read(&sp).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        std::fs::write(&sp, bytes).unwrap();
        assert!(Dataset::load(d.path()).is_err());
    }

    #[test]
    fn export_writes_rows() {
        let d = tempfile::tempdir().unwrap();
        let b = TimeSeriesBatch::raw(Tensor::from_f64(vec![1, 2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let p = export_csv(d.path(), &b, &["a".into(), "b".into()]).unwrap();
        assert_eq!(std::fs::read_to_string(&p[0]).unwrap(), "a,b\n1,4\n2,5\n3,6\n");
    }

    proptest! {
        #[test]
        fn nonoverlap_windows_are_exhaustive_and_disjoint(rows in 0usize..400, window in 1usize..64) {
            let chans = vec![(0..rows).map(|v| v as f64).collect::<Vec<_>>()];
            let w = window_series(&chans, window, WindowPolicy::Nonoverlap);
            prop_assert_eq!(w.len() / window, rows / window);
            let mut seen = std::collections::HashSet::new();
            for v in &w {
                prop_assert!(seen.insert(*v as i64));
            }
        }
    }
}
