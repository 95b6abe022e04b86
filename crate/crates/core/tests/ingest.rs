use std::io::Write;
use std::path::Path;

use tcddpm::dataio::{export_csv, ingest_csv, Dataset, IngestOptions, Recipe, ScalerKind, SourceSpec, SplitConfig};

fn write_csv(path: &Path, rows: usize, f: impl Fn(usize) -> [f64; 2]) {
    let mut w = std::fs::File::create(path).unwrap();
    writeln!(w, "time,a,b").unwrap();
    for i in 0..rows {
        let [a, b] = f(i);
        writeln!(w, "{i},{a},{b}").unwrap();
    }
}

fn opts(recipe: Recipe) -> IngestOptions {
    IngestOptions {
        name: "test".into(),
        channel_columns: vec!["a".into(), "b".into()],
        recipe,
        delimiter: b',',
        split: SplitConfig::default(),
        scaler: ScalerKind::MinMax,
        sampling_rate_hz: None,
    }
}

#[test]
fn eeg_recipe_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("rec.csv");
    // 2304 points at 256 Hz resample to 900
    write_csv(&p, 2304, |i| {
        let t = i as f64 / 256.0;
        [(2.0 * std::f64::consts::PI * 5.0 * t).sin(), 1.0 + 0.1 * t]
    });
    let ds = ingest_csv(&[SourceSpec::new(&p)], &opts(Recipe::eeg())).unwrap();
    assert_eq!(ds.shape(), [7, 2, 128]);
    assert_eq!(ds.manifest.sampling_rate_hz, Some(100.0));
    assert_eq!(ds.manifest.source_files[0].rows, 2304);

    let out = dir.path().join("prepared");
    ds.save(&out).unwrap();
    let back = Dataset::load(&out).unwrap();
    assert_eq!(back, ds);
    assert_eq!(back.manifest.hash(), ds.manifest.hash());

    let raw = back.raw(None);
    let round = raw.clone().normalize(&back.manifest.scaler).unwrap().denormalize(&back.manifest.scaler).unwrap();
    let err = raw.values.max_abs_diff(&round.values);
    assert!(err < 1e-5, "{err}");

    let files = export_csv(&dir.path().join("export"), &raw, &back.manifest.channel_names).unwrap();
    assert_eq!(files.len(), 7);
    let text = std::fs::read_to_string(&files[0]).unwrap();
    assert_eq!(text.lines().next().unwrap(), "a,b");
    assert_eq!(text.lines().count(), 129);
}

#[test]
fn subjects_and_labels_survive_ingest() {
    let dir = tempfile::tempdir().unwrap();
    let mut specs = Vec::new();
    for (k, label) in ["fall", "adl"].iter().enumerate() {
        let p = dir.path().join(format!("{label}.csv"));
        write_csv(&p, 480, |i| [i as f64, k as f64]);
        specs.push(SourceSpec {
            path: p,
            subject_id: Some(format!("S{k}")),
            label: Some(label.to_string()),
        });
    }
    let ds = ingest_csv(&specs, &opts(Recipe::smartfall())).unwrap();
    assert_eq!(ds.shape()[0], 4);
    assert_eq!(ds.source_of(0).label.as_deref(), Some("fall"));
    assert_eq!(ds.source_of(3).subject_id.as_deref(), Some("S1"));
}
