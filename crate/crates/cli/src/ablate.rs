//! The four-configuration component study.
//!
//! "Baseline DDPM" has single-scale blocks and no bottleneck transformer;
//! "+ Transformer" and "+ Multi-Scale Convolution" each switch one
//! component on; "Full Model" has both. All four share the initialization
//! seed, the training budget and the context encoder used for scoring.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use tcddpm::dataio::Split;
use tcddpm::diffusion::{TrainConfig, TrainOutputs, Trainer};
use tcddpm::metrics::{render_metric_table, MetricReport};
use tcddpm::unet::{DenoiserModel, UNetConfig};
use tcddpm::{Error, Result};

use crate::commands::Context;

pub const VARIANTS: [(&str, &str, bool, bool); 4] = [
    ("Baseline DDPM", "baseline", false, false),
    ("+ Transformer", "transformer", false, true),
    ("+ Multi-Scale Convolution", "msconv", true, false),
    ("Full Model", "full", true, true),
];

pub fn variants(base: &UNetConfig) -> Vec<(&'static str, &'static str, UNetConfig)> {
    VARIANTS
        .iter()
        .map(|&(name, slug, ms, tr)| {
            let cfg = UNetConfig {
                use_msconv: ms,
                use_transformer: tr,
                ..base.clone()
            };
            (name, slug, cfg)
        })
        .collect()
}

pub fn param_names(cfg: &UNetConfig) -> Result<BTreeSet<String>> {
    let m = DenoiserModel::<f32>::new(cfg.clone(), 0)?;
    Ok(m.store.names().iter().cloned().collect())
}

/// Names that one toggle adds or removes, and the matched block budgets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToggleCheck {
    /// Parameters present only with the transformer on.
    pub transformer_params: Vec<String>,
    /// Block parameters of the multi-scale and the single-scale variants.
    pub msconv_params: Vec<String>,
    pub plain_params: Vec<String>,
    pub msconv_block_scalars: usize,
    pub plain_block_scalars: usize,
}

fn block_scalars(cfg: &UNetConfig, names: &BTreeSet<String>) -> Result<usize> {
    let m = DenoiserModel::<f32>::new(cfg.clone(), 0)?;
    Ok(m
        .store
        .ids()
        .filter(|&id| names.contains(m.store.name(id)))
        .map(|id| m.store.get(id).numel())
        .sum())
}

fn diff(a: &BTreeSet<String>, b: &BTreeSet<String>) -> BTreeSet<String> {
    a.difference(b).cloned().collect()
}

/// Check that the four configurations differ only by the two toggles:
/// the transformer adds the same parameter names whether or not the blocks
/// are multi-scale, and switching block type touches only block names.
pub fn check_toggles(base: &UNetConfig) -> Result<ToggleCheck> {
    let v = variants(base);
    let names: Vec<BTreeSet<String>> = v.iter().map(|(_, _, c)| param_names(c)).collect::<Result<_>>()?;
    let (b, t, m, f) = (&names[0], &names[1], &names[2], &names[3]);
    let bad = |what: &str| Err(Error::Numerical(format!("ablation toggles are not clean: {what}")));
    let tr_plain = diff(t, b);
    let tr_ms = diff(f, m);
    if !diff(b, t).is_empty() || !diff(m, f).is_empty() || tr_plain != tr_ms {
        return bad("the transformer toggle changes different names per block type");
    }
    if tr_plain.iter().any(|n| !n.starts_with("unet.bottleneck.transformer.")) {
        return bad("transformer parameters outside the bottleneck");
    }
    let ms_only = diff(m, b);
    let plain_only = diff(b, m);
    if ms_only != diff(f, t) || plain_only != diff(t, f) {
        return bad("the block toggle changes different names with and without the transformer");
    }
    if ms_only.iter().any(|n| !n.contains(".msconv.")) || plain_only.iter().any(|n| !n.contains(".plain.")) {
        return bad("the block toggle touches non-block parameters");
    }
    Ok(ToggleCheck {
        transformer_params: tr_plain.into_iter().collect(),
        msconv_block_scalars: block_scalars(&v[3].2, &ms_only)?,
        plain_block_scalars: block_scalars(&v[0].2, &plain_only)?,
        msconv_params: ms_only.into_iter().collect(),
        plain_params: plain_only.into_iter().collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub use_msconv: bool,
    pub use_transformer: bool,
    pub param_count: usize,
    pub final_loss: f64,
    pub metrics: MetricReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub iterations: u64,
    pub samples: usize,
    pub toggles: ToggleCheck,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn render(&self) -> String {
        let cols: Vec<(String, MetricReport)> = self.rows.iter().map(|r| (r.name.clone(), r.metrics.clone())).collect();
        render_metric_table(&cols)
    }
}

pub fn run(ctx: &Context, iterations: Option<u64>) -> Result<()> {
    let cfg = &ctx.cfg;
    let iterations = iterations.unwrap_or(cfg.ablation.iterations);
    let toggles = check_toggles(&cfg.unet)?;
    let ds = ctx.dataset()?;
    let data = ds.normalized(Some(Split::Train))?.values;
    let sched = cfg.schedule.build()?;
    let enc = ctx.encoder(&ds)?;
    let mut rows = Vec::new();
    for (name, slug, unet) in variants(&cfg.unet) {
        let mut model = DenoiserModel::<f32>::new(unet.clone(), ctx.seed("model"))?;
        let tc = TrainConfig {
            iterations,
            checkpoint_every: 0,
            precision: 32,
            ..cfg.train.clone()
        };
        let ckdir = ctx.run.path(format!("checkpoints/ablation/{slug}"));
        let outputs = TrainOutputs {
            checkpoint_dir: Some(ckdir.clone()),
            loss_csv: Some(ctx.run.path(format!("logs/ablation_{slug}_loss.csv"))),
            model_meta: serde_json::json!({
                "schedule": cfg.schedule,
                "dataset_hash": ds.manifest.hash(),
                "ablation": name,
            }),
        };
        eprintln!("ablation: {name} ({} parameters, {iterations} iterations)", model.param_count());
        let final_loss = {
            let mut tr = Trainer::new(&mut model, &sched, tc)?;
            tr.run(&data, &outputs)?;
            tr.losses.last().map_or(f64::NAN, |r| r.loss)
        };
        let batch = ctx.sample_checkpoint(&ckdir.join("last.tckp"), &ds, cfg.ablation.samples, ctx.seed("ablation-sample"))?;
        let store_path = ctx.run.path(format!("samples/ablation/{slug}.tcws"));
        batch.to_store().save(&store_path)?;
        let metrics = ctx.score(&ds, &batch, &enc)?;
        rows.push(AblationRow {
            name: name.to_string(),
            use_msconv: unet.use_msconv,
            use_transformer: unet.use_transformer,
            param_count: model.param_count(),
            final_loss,
            metrics,
        });
    }
    let report = AblationReport {
        iterations,
        samples: cfg.ablation.samples,
        toggles,
        rows,
    };
    let table = report.render();
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    ctx.write_report("ablation", &json, &table)?;
    print!("{table}");
    Ok(())
}
