//! Command implementations over a run directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tcddpm::dataio::{
    export_csv, ingest_csv, Dataset, IngestOptions, Split, TimeSeriesBatch, WindowStore, MANIFEST_FILE,
};
use tcddpm::diffusion::{checkpoint_name, sample, SampleRequest, TrainOutputs, Trainer};
use tcddpm::metrics::encoder::MIN_ENCODER_WINDOWS;
use tcddpm::metrics::{self, kde, train_context_encoder, ContextEncoder, MetricReport};
use tcddpm::ndgrad::checkpoint::{self, sha256_hex};
use tcddpm::schedule::ScheduleConfig;
use tcddpm::unet::{DenoiserModel, UNetConfig};
use tcddpm::utility::{run_utility_experiment, rewindow, UtilityData};
use tcddpm::{seeds, Error, Real, Result, Tensor};

use crate::cli::Command;
use crate::config::{DataSource, Reference, RunConfig};
use crate::rundir::RunDir;

pub const SAMPLES_STORE: &str = "samples/windows.tcws";
pub const SAMPLES_META: &str = "samples/samples.json";
pub const LAST_CHECKPOINT: &str = "checkpoints/last.tckp";

/// A resolved config bound to its run directory.
pub struct Context {
    pub run: RunDir,
    pub cfg: RunConfig,
}

fn progress(msg: &str) {
    eprintln!("{msg}");
}

impl Context {
    pub fn seed(&self, name: &str) -> u64 {
        seeds::derive_named(self.cfg.seed, name)
    }

    /// Relative paths in command arguments are taken from the working
    /// directory.
    fn arg_path(&self, p: &Option<PathBuf>, default: &str) -> PathBuf {
        match p {
            Some(p) => p.clone(),
            None => self.run.path(default),
        }
    }

    pub fn dataset(&self) -> Result<Dataset> {
        let dir = self.run.path("data");
        if !dir.join(MANIFEST_FILE).exists() {
            return Err(Error::data(
                dir.display().to_string(),
                "no ingested dataset; run `ingest` first",
            ));
        }
        Dataset::load(&dir)
    }

    pub fn execute(&self, cmd: &Command) -> Result<()> {
        self.run.begin(cmd.name())?;
        match cmd {
            Command::Ingest => self.ingest()?,
            Command::Train { resume } => self.train(*resume)?,
            Command::Generate {
                count,
                seed,
                checkpoint,
            } => self.generate(*count, *seed, checkpoint)?,
            Command::Evaluate { synth } => self.evaluate(synth)?,
            Command::Utility { synth, checkpoint } => self.utility(synth, checkpoint)?,
            Command::Ablate { iterations } => crate::ablate::run(self, *iterations)?,
            Command::Plot { synth } => self.plot(synth)?,
            Command::Replay { .. } => return Err(Error::config("replay cannot be nested")),
        }
        self.run.finish(cmd)
    }

    pub fn ingest(&self) -> Result<()> {
        let d = &self.cfg.data;
        let split = d.split(self.cfg.seed);
        let ds = match &d.source {
            DataSource::Toy {
                generator,
                windows,
                length,
                channels,
            } => Dataset::toy_with(*generator, [*windows, *channels, *length], self.seed("data"), split, d.scaler)?,
            DataSource::Csv {
                files,
                channel_columns,
                delimiter,
                recipe,
                sampling_rate_hz,
            } => {
                if files.is_empty() {
                    return Err(Error::config("data.source.files is empty"));
                }
                if !delimiter.is_ascii() {
                    return Err(Error::config(format!("data.source.delimiter `{delimiter}` is not ASCII")));
                }
                let opts = IngestOptions {
                    name: d.name.clone(),
                    channel_columns: channel_columns.clone(),
                    recipe: recipe.clone(),
                    delimiter: *delimiter as u8,
                    split,
                    scaler: d.scaler,
                    sampling_rate_hz: *sampling_rate_hz,
                };
                ingest_csv(files, &opts)?
            }
        };
        ds.save(&self.run.path("data"))?;
        for w in &ds.manifest.warnings {
            progress(&format!("warning: {w}"));
            self.run.log(&format!("warning: {w}"))?;
        }
        progress(&format!(
            "ingested {} windows of {:?} into {}",
            ds.manifest.num_windows(),
            &ds.shape()[1..],
            self.run.path("data").display()
        ));
        Ok(())
    }

    pub fn train(&self, resume: bool) -> Result<()> {
        match self.cfg.train.precision {
            64 => self.train_as::<f64>(resume),
            _ => self.train_as::<f32>(resume),
        }
    }

    fn train_as<T: Real>(&self, resume: bool) -> Result<()> {
        let ds = self.dataset()?;
        let data = ds.normalized(Some(Split::Train))?.values.cast::<T>();
        let sched = self.cfg.schedule.build()?;
        let mut model = DenoiserModel::<T>::new(self.cfg.unet.clone(), self.seed("model"))?;
        let outputs = TrainOutputs {
            checkpoint_dir: Some(self.run.path("checkpoints")),
            loss_csv: Some(self.run.path("logs/train_loss.csv")),
            model_meta: serde_json::json!({
                "schedule": self.cfg.schedule,
                "dataset_hash": ds.manifest.hash(),
            }),
        };
        let latest = if resume { latest_checkpoint(&self.run.path("checkpoints"))? } else { None };
        let mut trainer = match latest {
            Some(p) => {
                progress(&format!("resuming from {}", p.display()));
                let ck = checkpoint::load::<T>(&p)?;
                Trainer::resume(&mut model, &sched, self.cfg.train.clone(), ck)?
            }
            None => {
                if resume {
                    progress("no checkpoint to resume from; starting fresh");
                }
                Trainer::new(&mut model, &sched, self.cfg.train.clone())?
            }
        };
        progress(&format!(
            "training {} parameters on {} windows for {} iterations",
            trainer.model.param_count(),
            data.shape()[0],
            self.cfg.train.iterations
        ));
        trainer.run(&data, &outputs)?;
        if let Some(last) = trainer.losses.last() {
            progress(&format!("final loss {:.5} at iteration {}", last.loss, last.iteration));
        }
        Ok(())
    }

    fn resolve_checkpoint(&self, p: &Option<PathBuf>) -> Result<PathBuf> {
        let path = self.arg_path(p, LAST_CHECKPOINT);
        if !path.exists() {
            return Err(Error::data(path.display().to_string(), "checkpoint not found; run `train` first"));
        }
        Ok(path)
    }

    /// Normalized-space samples from a checkpoint, returned in original
    /// units.
    pub fn sample_checkpoint(&self, path: &Path, ds: &Dataset, count: usize, seed: u64) -> Result<TimeSeriesBatch> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (header, _) = checkpoint::read_header(&bytes)?;
        let unet: UNetConfig = serde_json::from_value(header.model["unet"].clone())
            .map_err(|e| Error::data(path.display().to_string(), format!("model config: {e}")))?;
        let sched_cfg: ScheduleConfig = match header.model["meta"].get("schedule") {
            Some(v) => serde_json::from_value(v.clone())
                .map_err(|e| Error::data(path.display().to_string(), format!("schedule: {e}")))?,
            None => self.cfg.schedule,
        };
        let sched = sched_cfg.build()?;
        let req = SampleRequest {
            count,
            channels: unet.in_channels,
            length: unet.seq_len,
            seed,
        };
        let values: Tensor<f32> = if header.dtype == "f64" {
            let ck = checkpoint::from_bytes::<f64>(&bytes)?;
            let mut m = DenoiserModel::<f64>::new(unet, 0)?;
            checkpoint::restore_into(&mut m.store, &ck.store)?;
            sample(&m, &sched, &req)?.cast()
        } else {
            let ck = checkpoint::from_bytes::<f32>(&bytes)?;
            let mut m = DenoiserModel::<f32>::new(unet, 0)?;
            checkpoint::restore_into(&mut m.store, &ck.store)?;
            sample(&m, &sched, &req)?
        };
        let batch = TimeSeriesBatch {
            values,
            normalized: true,
            out_of_range: 0,
        };
        batch.denormalize(&ds.manifest.scaler)
    }

    pub fn generate(&self, count: Option<usize>, seed: Option<u64>, ck: &Option<PathBuf>) -> Result<()> {
        let ds = self.dataset()?;
        let path = self.resolve_checkpoint(ck)?;
        let count = count.unwrap_or(self.cfg.generate.count);
        let seed = seed.or(self.cfg.generate.seed).unwrap_or_else(|| self.seed("generate"));
        progress(&format!("sampling {count} sequences with seed {seed} from {}", path.display()));
        let batch = self.sample_checkpoint(&path, &ds, count, seed)?;
        let store = batch.to_store();
        store.save(&self.run.path(SAMPLES_STORE))?;
        let csv_dir = self.run.path("samples/csv");
        if csv_dir.exists() {
            std::fs::remove_dir_all(&csv_dir).map_err(|e| Error::io(&csv_dir, e))?;
        }
        export_csv(&csv_dir, &batch, &ds.manifest.channel_names)?;
        let meta = SamplesMeta {
            count,
            seed,
            shape: store.shape,
            checkpoint_sha256: sha256_hex(&std::fs::read(&path).map_err(|e| Error::io(&path, e))?),
            dataset_hash: ds.manifest.hash(),
            store_sha256: sha256_hex(&store.to_bytes()),
        };
        let mp = self.run.path(SAMPLES_META);
        std::fs::write(&mp, serde_json::to_string_pretty(&meta).expect("meta serializes")).map_err(|e| Error::io(&mp, e))?;
        progress(&format!("wrote {}", self.run.path(SAMPLES_STORE).display()));
        Ok(())
    }

    /// Real windows the synthetic set is scored against.
    pub fn reference(&self, ds: &Dataset) -> TimeSeriesBatch {
        match self.cfg.evaluate.reference {
            Reference::Eval => ds.raw(Some(Split::Eval)),
            Reference::All => ds.raw(None),
        }
    }

    pub fn load_synth(&self, p: &Option<PathBuf>, ds: &Dataset) -> Result<(TimeSeriesBatch, PathBuf)> {
        let path = self.arg_path(p, SAMPLES_STORE);
        if !path.exists() {
            return Err(Error::data(path.display().to_string(), "synthetic store not found; run `generate` first"));
        }
        let store = WindowStore::load(&path)?;
        let [_, c, l] = ds.shape();
        if store.shape[1] != c || store.shape[2] != l {
            return Err(Error::data(
                path.display().to_string(),
                format!("windows are {:?}, dataset windows are [_, {c}, {l}]", store.shape),
            ));
        }
        let values = Tensor::new(store.shape.to_vec(), store.values)?;
        Ok((TimeSeriesBatch::raw(values), path))
    }

    /// Context encoder trained on normalized training windows.
    pub fn encoder(&self, ds: &Dataset) -> Result<ContextEncoder> {
        let mut train = ds.normalized(Some(Split::Train))?.values;
        if train.shape()[0] < MIN_ENCODER_WINDOWS {
            train = ds.normalized(None)?.values;
        }
        train_context_encoder(&train, self.cfg.metrics.encoder.clone(), self.seed("encoder"))
    }

    pub fn score(&self, ds: &Dataset, synth: &TimeSeriesBatch, enc: &ContextEncoder) -> Result<MetricReport> {
        let real = self.reference(ds);
        let mut r = metrics::evaluate(
            &real,
            synth,
            &ds.manifest.scaler,
            &self.cfg.metrics,
            self.seed("metrics"),
            Some(enc),
        )?;
        r.dataset_hash = Some(ds.manifest.hash());
        Ok(r)
    }

    pub fn evaluate(&self, synth: &Option<PathBuf>) -> Result<()> {
        let ds = self.dataset()?;
        let (batch, path) = self.load_synth(synth, &ds)?;
        progress("training context encoder");
        let enc = self.encoder(&ds)?;
        progress(&format!("scoring {} synthetic windows", batch.dims().0));
        let mut report = self.score(&ds, &batch, &enc)?;
        report.checkpoint_hash = samples_meta_for(&path).map(|m| m.checkpoint_sha256);
        let table = metrics::render_methods_table(&[(self.cfg.data.name.clone(), report.clone())]);
        self.write_report("metrics", &report.to_json(), &table)?;
        print!("{table}");
        Ok(())
    }

    pub fn write_report(&self, stem: &str, json: &str, text: &str) -> Result<()> {
        for (ext, body) in [("json", json), ("txt", text)] {
            let p = self.run.path(format!("reports/{stem}.{ext}"));
            std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }

    pub fn utility(&self, synth: &Option<PathBuf>, ck: &Option<PathBuf>) -> Result<()> {
        let u = &self.cfg.utility;
        let exp = &u.experiment;
        let (real, ds) = match &self.cfg.data.source {
            DataSource::Toy { channels, .. } => (
                UtilityData::toy(
                    u.toy_subjects,
                    u.toy_windows_per_class,
                    u.toy_length,
                    *channels,
                    self.seed("utility-data"),
                )?
                .rewindow(exp.window, exp.step)?,
                self.dataset().ok(),
            ),
            DataSource::Csv { .. } => {
                let ds = self.dataset()?;
                (UtilityData::from_dataset(&ds, exp.window, exp.step)?, Some(ds))
            }
        };
        let synth_batch = match ck {
            Some(_) => {
                let ds = ds
                    .as_ref()
                    .ok_or_else(|| Error::data("data", "sampling needs the ingested dataset; run `ingest` first"))?;
                let path = self.resolve_checkpoint(ck)?;
                progress(&format!("sampling {} synthetic sequences", u.synth_sequences));
                self.sample_checkpoint(&path, ds, u.synth_sequences, self.seed("utility-synth"))?
                    .values
            }
            None => {
                let path = self.arg_path(synth, SAMPLES_STORE);
                if !path.exists() {
                    return Err(Error::data(path.display().to_string(), "synthetic store not found; run `generate` first"));
                }
                let s = WindowStore::load(&path)?;
                Tensor::new(s.shape.to_vec(), s.values)?
            }
        };
        let synth_windows = rewindow(&synth_batch, exp.window, exp.step)?;
        progress(&format!(
            "utility: {} real windows from {} subjects, {} synthetic fall windows",
            real.labels.len(),
            real.subject_set().len(),
            synth_windows.shape()[0]
        ));
        let report = run_utility_experiment(&real, &synth_windows, exp)?;
        let table = report.render();
        self.write_report("utility", &report.to_json(), &table)?;
        print!("{table}");
        Ok(())
    }

    pub fn plot(&self, synth: &Option<PathBuf>) -> Result<()> {
        let ds = self.dataset()?;
        let (batch, _) = self.load_synth(synth, &ds)?;
        let real = self.reference(&ds);
        let dir = self.run.path("plots");
        let a = kde::emit_kde(&real.values.to_f64_vec(), &batch.values.to_f64_vec(), &dir, "kde_all")?;
        let (_, c, l) = real.dims();
        let channel = |b: &TimeSeriesBatch, k: usize| -> Vec<f64> {
            b.values
                .data()
                .chunks(c * l)
                .flat_map(|w| w[k * l..(k + 1) * l].iter().map(|&v| v as f64))
                .collect()
        };
        for (k, name) in ds.manifest.channel_names.iter().enumerate() {
            let stem = format!("kde_{k:02}_{}", sanitize(name));
            kde::emit_kde(&channel(&real, k), &channel(&batch, k), &dir, &stem)?;
        }
        progress(&format!("wrote {}", a.svg.display()));
        Ok(())
    }
}

fn sanitize(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplesMeta {
    pub count: usize,
    pub seed: u64,
    pub shape: [usize; 3],
    pub checkpoint_sha256: String,
    pub dataset_hash: String,
    pub store_sha256: String,
}

fn samples_meta_for(store: &Path) -> Option<SamplesMeta> {
    let p = store.with_file_name("samples.json");
    let meta: SamplesMeta = serde_json::from_str(&std::fs::read_to_string(p).ok()?).ok()?;
    let bytes = std::fs::read(store).ok()?;
    (sha256_hex(&bytes) == meta.store_sha256).then_some(meta)
}

/// Highest-numbered `iter_*.tckp` in `dir`.
pub fn latest_checkpoint(dir: &Path) -> Result<Option<PathBuf>> {
    if !dir.exists() {
        return Ok(None);
    }
    let mut best: Option<(u64, PathBuf)> = None;
    for e in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = e.map_err(|e| Error::io(dir, e))?.path();
        let Some(name) = p.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        let Some(num) = name.strip_prefix("iter_").and_then(|r| r.strip_suffix(".tckp")) else {
            continue;
        };
        if let Ok(i) = num.parse::<u64>() {
            if checkpoint_name(i) == name && best.as_ref().is_none_or(|(b, _)| i > *b) {
                best = Some((i, p));
            }
        }
    }
    Ok(best.map(|(_, p)| p))
}
