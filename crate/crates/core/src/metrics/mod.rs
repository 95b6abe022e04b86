//! Evaluation metrics: JSD, discriminative and predictive scores,
//! Context-FID, and KDE plots.

pub mod encoder;
pub mod fid;
pub mod jsd;
pub mod kde;
pub mod recurrent;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataio::{Scaler, TimeSeriesBatch};
use crate::error::{Error, Result};
use crate::seeds;
pub use encoder::{train_context_encoder, ContextEncoder, EncoderConfig};
pub use fid::Fid;
pub use recurrent::{discriminative_score, predictive_score, DiscriminativeConfig, PredictiveConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricConfig {
    pub bins: usize,
    /// Average per-channel JSD instead of pooling all values.
    #[serde(default)]
    pub jsd_per_channel: bool,
    pub discriminative: DiscriminativeConfig,
    pub predictive: PredictiveConfig,
    pub encoder: EncoderConfig,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            bins: 50,
            jsd_per_channel: false,
            discriminative: DiscriminativeConfig::default(),
            predictive: PredictiveConfig::default(),
            encoder: EncoderConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub context_fid: f64,
    pub discriminative: f64,
    pub predictive: f64,
    pub jsd: f64,
    pub fid_degraded: bool,
    pub config: MetricConfig,
    pub seed: u64,
    pub seeds: BTreeMap<String, u64>,
    pub encoder_hash: String,
    pub dataset_hash: Option<String>,
    pub checkpoint_hash: Option<String>,
    pub real_windows: usize,
    pub synth_windows: usize,
}

impl MetricReport {
    pub fn values(&self) -> [f64; 4] {
        [self.context_fid, self.discriminative, self.predictive, self.jsd]
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

pub const METRIC_NAMES: [&str; 4] = ["Context-FID", "Discriminative", "Predictive", "JSD"];

/// Pooled JSD of two batches in original units.
pub fn batch_jsd(real: &TimeSeriesBatch, synth: &TimeSeriesBatch, scaler: &Scaler, cfg: &MetricConfig) -> Result<f64> {
    let r = real.clone().denormalize(scaler)?;
    let s = synth.clone().denormalize(scaler)?;
    let (a, b) = (r.values.to_f64_vec(), s.values.to_f64_vec());
    if cfg.jsd_per_channel {
        let (_, c, l) = r.dims();
        jsd::jsd_per_channel(&a, &b, c, l, cfg.bins)
    } else {
        jsd::jsd(&a, &b, cfg.bins)
    }
}

/// All four metrics. Network-based scores run in normalized units, JSD in
/// original units. Without an `encoder`, one is trained on `real`.
pub fn evaluate(
    real: &TimeSeriesBatch,
    synth: &TimeSeriesBatch,
    scaler: &Scaler,
    cfg: &MetricConfig,
    seed: u64,
    encoder: Option<&ContextEncoder>,
) -> Result<MetricReport> {
    let (nr, c, l) = real.dims();
    let (ns, cs, ls) = synth.dims();
    if (c, l) != (cs, ls) {
        return Err(Error::shape(
            "evaluate",
            format!("real [{nr}, {c}, {l}] vs synth [{ns}, {cs}, {ls}]"),
        ));
    }
    let mut seed_map = BTreeMap::new();
    for name in ["discriminative", "predictive", "encoder"] {
        seed_map.insert(name.to_string(), seeds::derive_named(seed, name));
    }
    let jsd = batch_jsd(real, synth, scaler, cfg)?;
    let rn = real.clone().normalize(scaler)?.values;
    let sn = synth.clone().normalize(scaler)?.values;
    let trained;
    let enc = match encoder {
        Some(e) => e,
        None => {
            trained = train_context_encoder(&rn, cfg.encoder.clone(), seed_map["encoder"])?;
            &trained
        }
    };
    let f = fid::fid_from_embeddings(&enc.embed(&rn)?, &enc.embed(&sn)?)?;
    let discriminative = discriminative_score(&rn, &sn, &cfg.discriminative, seed_map["discriminative"])?;
    let predictive = predictive_score(&rn, &sn, &cfg.predictive, seed_map["predictive"])?;
    Ok(MetricReport {
        context_fid: f.value,
        discriminative,
        predictive,
        jsd,
        fid_degraded: f.degraded,
        config: cfg.clone(),
        seed,
        seeds: seed_map,
        encoder_hash: enc.hash(),
        dataset_hash: None,
        checkpoint_hash: None,
        real_windows: nr,
        synth_windows: ns,
    })
}

/// Methods as rows, metrics as columns.
pub fn render_methods_table(rows: &[(String, MetricReport)]) -> String {
    let w = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(6).max(6);
    let mut s = String::new();
    let _ = write!(s, "| {:<w$} |", "Method");
    for m in METRIC_NAMES {
        let _ = write!(s, " {m:>14} |");
    }
    s.push('\n');
    let _ = write!(s, "|{}|", "-".repeat(w + 2));
    for _ in METRIC_NAMES {
        let _ = write!(s, "{}:|", "-".repeat(15));
    }
    s.push('\n');
    for (name, r) in rows {
        let _ = write!(s, "| {name:<w$} |");
        for v in r.values() {
            let _ = write!(s, " {v:>14.4} |");
        }
        s.push('\n');
    }
    s
}

/// Metrics as rows, configurations as columns.
pub fn render_metric_table(cols: &[(String, MetricReport)]) -> String {
    let w = cols.iter().map(|(n, _)| n.len()).max().unwrap_or(10).max(10);
    let mut s = String::new();
    let _ = write!(s, "| {:<14} |", "Metric");
    for (n, _) in cols {
        let _ = write!(s, " {n:>w$} |");
    }
    s.push('\n');
    let _ = write!(s, "|{}|", "-".repeat(16));
    for _ in cols {
        let _ = write!(s, "{}:|", "-".repeat(w + 1));
    }
    s.push('\n');
    for (k, m) in METRIC_NAMES.iter().enumerate() {
        let _ = write!(s, "| {m:<14} |");
        for (_, r) in cols {
            let _ = write!(s, " {:>w$.4} |", r.values()[k]);
        }
        s.push('\n');
    }
    s
}
