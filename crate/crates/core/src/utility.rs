//! Downstream fall-detection experiment: an LSTM classifier trained on real
//! windows with and without synthetic fall windows.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{toy, window_series, Dataset, Scaler, ScalerKind, ToyKind, WindowPolicy};
use crate::error::{Error, Result};
use crate::ndgrad::nn::{unstack_time, BatchNorm1d, Linear, Lstm};
use crate::ndgrad::{Adam, AdamConfig, ParamStore, Session, Tensor, Var};
use crate::seeds;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Mix {
    pub adl: f64,
    pub real_fall: f64,
    pub synth_fall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierConfig {
    pub hidden: usize,
    pub dense: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub learning_rate: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            hidden: 128,
            dense: 128,
            batch_size: 64,
            max_epochs: 250,
            patience: 20,
            learning_rate: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtilityConfig {
    pub window: usize,
    pub step: usize,
    /// Fractions of subjects for (train, validation, test).
    pub split: (f64, f64, f64),
    pub mix: Mix,
    pub iterations: usize,
    pub threshold: f64,
    pub classifier: ClassifierConfig,
    pub seed: u64,
}

impl Default for UtilityConfig {
    fn default() -> Self {
        UtilityConfig {
            window: 128,
            step: 10,
            split: (0.6, 0.2, 0.2),
            mix: Mix {
                adl: 0.6,
                real_fall: 0.2,
                synth_fall: 0.2,
            },
            iterations: 5,
            threshold: 0.5,
            classifier: ClassifierConfig::default(),
            seed: 0,
        }
    }
}

pub const MIN_SUBJECTS: usize = 4;

impl UtilityConfig {
    pub fn validate(&self) -> Result<()> {
        let m = self.mix;
        if (m.adl + m.real_fall + m.synth_fall - 1.0).abs() > 1e-9 || m.adl <= 0.0 || m.real_fall < 0.0 || m.synth_fall < 0.0 {
            return Err(Error::config("mix fractions must be non-negative and sum to 1"));
        }
        let (a, b, c) = self.split;
        if (a + b + c - 1.0).abs() > 1e-9 || a <= 0.0 || b <= 0.0 || c <= 0.0 {
            return Err(Error::config("split fractions must be positive and sum to 1"));
        }
        if self.window == 0 || self.step == 0 || self.iterations == 0 {
            return Err(Error::config("window, step and iterations must be positive"));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::config("threshold must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Labeled real windows with their subject ids. Label 1 is a fall.
#[derive(Clone, Debug, PartialEq)]
pub struct UtilityData {
    pub windows: Tensor<f32>,
    pub labels: Vec<u8>,
    pub subjects: Vec<String>,
}

fn parse_label(s: &str) -> Option<u8> {
    match s.to_ascii_lowercase().as_str() {
        "fall" | "1" => Some(1),
        "adl" | "0" => Some(0),
        _ => None,
    }
}

impl UtilityData {
    /// Cut every window of a dataset into classifier windows; label and
    /// subject come from the window's source file.
    pub fn from_dataset(ds: &Dataset, window: usize, step: usize) -> Result<Self> {
        let [n, c, l] = ds.shape();
        let mut values = Vec::new();
        let (mut labels, mut subjects) = (Vec::new(), Vec::new());
        for i in 0..n {
            let src = ds.source_of(i);
            let subject = src
                .subject_id
                .clone()
                .ok_or_else(|| Error::data(&src.path, "missing subject_id"))?;
            let label = src
                .label
                .as_deref()
                .and_then(parse_label)
                .ok_or_else(|| Error::data(&src.path, "label must be `fall` or `adl`"))?;
            let chans: Vec<Vec<f64>> = ds
                .store
                .window(i)
                .chunks(l)
                .map(|ch| ch.iter().map(|&v| v as f64).collect())
                .collect();
            let w = window_series(&chans, window, WindowPolicy::Overlap { step });
            let k = w.len() / (c * window);
            values.extend(w);
            labels.extend(std::iter::repeat_n(label, k));
            subjects.extend(std::iter::repeat_n(subject, k));
        }
        let m = labels.len();
        Ok(UtilityData {
            windows: Tensor::new(vec![m, c, window], values)?,
            labels,
            subjects,
        })
    }

    /// Toy fixture: ADL windows from the sines generator and fall windows
    /// from the switching generator, `per_class` of each per subject.
    pub fn toy(subjects: usize, per_class: usize, length: usize, channels: usize, seed: u64) -> Result<Self> {
        let mut values = Vec::new();
        let (mut labels, mut ids) = (Vec::new(), Vec::new());
        for s in 0..subjects {
            let adl = toy::generate(ToyKind::Sines, per_class, length, channels, seeds::derive(seed, 2 * s as u64))?;
            let fall = toy::generate(ToyKind::Switching, per_class, length, channels, seeds::derive(seed, 2 * s as u64 + 1))?;
            values.extend(adl);
            values.extend(fall);
            labels.extend(std::iter::repeat_n(0, per_class));
            labels.extend(std::iter::repeat_n(1, per_class));
            ids.extend(std::iter::repeat_n(format!("S{s:02}"), 2 * per_class));
        }
        Ok(UtilityData {
            windows: Tensor::new(vec![labels.len(), channels, length], values)?,
            labels,
            subjects: ids,
        })
    }

    /// Cut every window into sub-windows of `window` with `step`, keeping
    /// labels and subjects.
    pub fn rewindow(&self, window: usize, step: usize) -> Result<Self> {
        let l = self.windows.shape()[2];
        if window > l {
            return Err(Error::config(format!("classifier window {window} exceeds data windows of {l}")));
        }
        let k = WindowPolicy::Overlap { step }.count(l, window);
        let windows = rewindow(&self.windows, window, step)?;
        let labels = self.labels.iter().flat_map(|&y| std::iter::repeat_n(y, k)).collect();
        let subjects = self
            .subjects
            .iter()
            .flat_map(|s| std::iter::repeat_n(s.clone(), k))
            .collect();
        Ok(UtilityData {
            windows,
            labels,
            subjects,
        })
    }

    pub fn subject_set(&self) -> BTreeSet<String> {
        self.subjects.iter().cloned().collect()
    }
}

/// Slide a `[N, C, L]` batch into `[M, C, window]` windows with `step`.
pub fn rewindow(x: &Tensor<f32>, window: usize, step: usize) -> Result<Tensor<f32>> {
    let (n, c, l) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = Vec::new();
    for i in 0..n {
        let chans: Vec<Vec<f64>> = x.data()[i * c * l..(i + 1) * c * l]
            .chunks(l)
            .map(|ch| ch.iter().map(|&v| v as f64).collect())
            .collect();
        out.extend(window_series(&chans, window, WindowPolicy::Overlap { step }));
    }
    let m = out.len() / (c * window);
    Tensor::new(vec![m, c, window], out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl SubjectSplit {
    pub fn check_disjoint(&self) -> Result<()> {
        let a: BTreeSet<_> = self.train.iter().collect();
        let b: BTreeSet<_> = self.val.iter().collect();
        let c: BTreeSet<_> = self.test.iter().collect();
        if a.len() != self.train.len()
            || b.len() != self.val.len()
            || c.len() != self.test.len()
            || !a.is_disjoint(&b)
            || !a.is_disjoint(&c)
            || !b.is_disjoint(&c)
        {
            return Err(Error::Numerical(format!("subject split is not disjoint: {self:?}")));
        }
        Ok(())
    }
}

/// Shuffle subjects and assign `round(f * S)` (at least one) to validation
/// and test, the rest to training.
pub fn split_subjects(subjects: &BTreeSet<String>, fractions: (f64, f64, f64), rng: &mut ChaCha8Rng) -> Result<SubjectSplit> {
    let s = subjects.len();
    if s < MIN_SUBJECTS {
        return Err(Error::data(
            "utility",
            format!("need at least {MIN_SUBJECTS} subjects for disjoint train/validation/test, got {s}"),
        ));
    }
    let n_val = ((fractions.1 * s as f64).round() as usize).max(1);
    let n_test = ((fractions.2 * s as f64).round() as usize).max(1);
    if n_val + n_test >= s {
        return Err(Error::data("utility", format!("{s} subjects leave none for training")));
    }
    let mut all: Vec<String> = subjects.iter().cloned().collect();
    all.shuffle(rng);
    let split = SubjectSplit {
        val: all[..n_val].to_vec(),
        test: all[n_val..n_val + n_test].to_vec(),
        train: all[n_val + n_test..].to_vec(),
    };
    split.check_disjoint()?;
    Ok(split)
}

#[derive(Clone, Debug)]
pub struct Classifier {
    pub store: ParamStore<f32>,
    lstm: Lstm,
    dense: Linear,
    bn: BatchNorm1d,
    head: Linear,
}

impl Classifier {
    pub fn new(channels: usize, cfg: &ClassifierConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let lstm = Lstm::new(&mut store, "clf.lstm", channels, cfg.hidden, &mut rng)?;
        let dense = Linear::new(&mut store, "clf.dense", cfg.hidden, cfg.dense, true, &mut rng)?;
        let bn = BatchNorm1d::new(&mut store, "clf.bn", cfg.dense)?;
        let head = Linear::new(&mut store, "clf.out", cfg.dense, 1, true, &mut rng)?;
        Ok(Classifier {
            store,
            lstm,
            dense,
            bn,
            head,
        })
    }

    fn forward(&self, s: &mut Session<'_, f32>, x: Tensor<f32>) -> Result<Var> {
        let xv = s.input(x);
        let seq = unstack_time(s, xv)?;
        let h = self.lstm.forward(s, &seq)?;
        let d = self.dense.forward(s, h)?;
        let d = s.tape.relu(d);
        let d = self.bn.forward(s, d)?;
        let o = self.head.forward(s, d)?;
        Ok(s.tape.sigmoid(o))
    }

    /// Fall probabilities in eval mode.
    pub fn predict(&self, x: &Tensor<f32>) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(x.shape()[0]);
        for chunk in (0..x.shape()[0]).collect::<Vec<_>>().chunks(256) {
            let mut s = Session::inference(&self.store, false);
            let p = self.forward(&mut s, x.select_first(chunk))?;
            out.extend(s.value(p).data().iter().map(|&v| v as f64));
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

fn bce(p: &[f64], y: &[u8]) -> f64 {
    let eps = 1e-7;
    p.iter()
        .zip(y)
        .map(|(&p, &y)| {
            let p = p.clamp(eps, 1.0 - eps);
            if y == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum::<f64>()
        / p.len() as f64
}

fn check_two_classes(y: &[u8], what: &str) -> Result<()> {
    if !y.contains(&0) || !y.contains(&1) {
        return Err(Error::data("utility", format!("{what} set must contain both classes")));
    }
    Ok(())
}

/// Binary cross-entropy with Adam, early stopping on validation loss and
/// restoration of the best weights.
#[allow(clippy::too_many_arguments)]
pub fn train_classifier(
    x_train: &Tensor<f32>,
    y_train: &[u8],
    x_val: &Tensor<f32>,
    y_val: &[u8],
    cfg: &ClassifierConfig,
    threshold: f64,
    seed: u64,
) -> Result<(Classifier, Vec<EpochRecord>)> {
    check_two_classes(y_train, "training")?;
    check_two_classes(y_val, "validation")?;
    let c = x_train.shape()[1];
    let mut clf = Classifier::new(c, cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, 1));
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.learning_rate), &clf.store);
    let n = y_train.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::new();
    let mut best = (f64::INFINITY, clf.store.clone());
    let mut since_best = 0;
    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for b in order.chunks(cfg.batch_size.max(2)) {
            // batchnorm needs more than one sample
            if b.len() < 2 {
                continue;
            }
            let y = Tensor::new(vec![b.len(), 1], b.iter().map(|&i| y_train[i] as f32).collect())?;
            let out = {
                let mut s = Session::new(&clf.store, true);
                let p = clf.forward(&mut s, x_train.select_first(b))?;
                let yv = s.input(y);
                let loss = s.tape.bce_loss(p, yv)?;
                s.backward(loss)?
            };
            adam.step(&mut clf.store, &out.grads)?;
            clf.store.apply_bn_updates(&out.bn_updates);
            total += out.loss * b.len() as f64;
        }
        let p = clf.predict(x_val)?;
        let val_loss = bce(&p, y_val);
        let acc = p
            .iter()
            .zip(y_val)
            .filter(|(&p, &y)| (p >= threshold) == (y == 1))
            .count() as f64
            / y_val.len() as f64;
        history.push(EpochRecord {
            epoch,
            train_loss: total / n as f64,
            val_loss,
            val_accuracy: acc,
        });
        if val_loss < best.0 {
            best = (val_loss, clf.store.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    clf.store = best.1;
    Ok((clf, history))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn from_predictions(probs: &[f64], labels: &[u8], threshold: f64) -> Self {
        let mut c = Confusion {
            tp: 0,
            fp: 0,
            fn_: 0,
            tn: 0,
        };
        for (&p, &y) in probs.iter().zip(labels) {
            match (p >= threshold, y == 1) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

fn class_metrics(tp: usize, fp: usize, fn_: usize) -> ClassMetrics {
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    ClassMetrics { precision, recall, f1 }
}

/// Scores on a test set. Everything but accuracy is `None` when the test
/// set holds a single class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub auc: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub fall: Option<ClassMetrics>,
    pub adl: Option<ClassMetrics>,
    pub confusion: Confusion,
}

/// Area under the ROC curve as the normalized Mann-Whitney statistic, with
/// mid-ranks for ties.
pub fn roc_auc(probs: &[f64], labels: &[u8]) -> Option<f64> {
    let pos = labels.iter().filter(|&&y| y == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&a, &b| probs[a].total_cmp(&probs[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && probs[idx[j + 1]] == probs[idx[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            if labels[k] == 1 {
                rank_sum += mid;
            }
        }
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

pub fn evaluate_probabilities(probs: &[f64], labels: &[u8], threshold: f64) -> Evaluation {
    let c = Confusion::from_predictions(probs, labels, threshold);
    let accuracy = ratio(c.tp + c.tn, labels.len());
    let both = c.tp + c.fn_ > 0 && c.tn + c.fp > 0;
    if !both {
        return Evaluation {
            accuracy,
            auc: None,
            precision: None,
            recall: None,
            f1: None,
            fall: None,
            adl: None,
            confusion: c,
        };
    }
    let fall = class_metrics(c.tp, c.fp, c.fn_);
    let adl = class_metrics(c.tn, c.fn_, c.fp);
    Evaluation {
        accuracy,
        auc: roc_auc(probs, labels),
        precision: Some(0.5 * (fall.precision + adl.precision)),
        recall: Some(0.5 * (fall.recall + adl.recall)),
        f1: Some(0.5 * (fall.f1 + adl.f1)),
        fall: Some(fall),
        adl: Some(adl),
        confusion: c,
    }
}

pub fn evaluate_classifier(clf: &Classifier, x: &Tensor<f32>, labels: &[u8], threshold: f64) -> Result<Evaluation> {
    Ok(evaluate_probabilities(&clf.predict(x)?, labels, threshold))
}

/// Averaged scores of one arm.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmScores {
    pub accuracy: f64,
    pub auc: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl ArmScores {
    pub const NAMES: [&'static str; 5] = ["Accuracy", "AUC", "Precision", "Recall", "F1"];

    pub fn values(&self) -> [f64; 5] {
        [self.accuracy, self.auc, self.precision, self.recall, self.f1]
    }

    fn from_eval(e: &Evaluation) -> Result<Self> {
        let get = |v: Option<f64>, n: &str| v.ok_or_else(|| Error::data("utility", format!("{n} undefined on a single-class test set")));
        Ok(ArmScores {
            accuracy: e.accuracy,
            auc: get(e.auc, "AUC")?,
            precision: get(e.precision, "precision")?,
            recall: get(e.recall, "recall")?,
            f1: get(e.f1, "F1")?,
        })
    }

    fn mean(items: &[ArmScores]) -> Self {
        let n = items.len() as f64;
        let avg = |f: fn(&ArmScores) -> f64| items.iter().map(f).sum::<f64>() / n;
        ArmScores {
            accuracy: avg(|a| a.accuracy),
            auc: avg(|a| a.auc),
            precision: avg(|a| a.precision),
            recall: avg(|a| a.recall),
            f1: avg(|a| a.f1),
        }
    }
}

/// `(aug - base) / base * 100`.
pub fn percent_delta(base: f64, aug: f64) -> f64 {
    (aug - base) / base * 100.0
}

pub fn format_delta(base: f64, aug: f64) -> String {
    format!("{:+.2}%", percent_delta(base, aug))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationResult {
    pub seed: u64,
    pub split: SubjectSplit,
    pub baseline: ArmScores,
    pub augmented: ArmScores,
    pub train_windows: (usize, usize),
    pub baseline_epochs: usize,
    pub augmented_epochs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtilityReport {
    pub config: UtilityConfig,
    pub iterations: Vec<IterationResult>,
    pub baseline: ArmScores,
    pub augmented: ArmScores,
    pub delta_percent: [f64; 5],
}

impl UtilityReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Baseline row, then the augmented row with signed percent changes.
    pub fn render(&self) -> String {
        let mix = self.config.mix;
        let aug_name = format!(
            "{:.0}% ADL + {:.0}% real fall + {:.0}% synthetic fall",
            mix.adl * 100.0,
            mix.real_fall * 100.0,
            mix.synth_fall * 100.0
        );
        let w = aug_name.len().max(24);
        let mut s = String::new();
        let _ = write!(s, "| {:<w$} |", "Training data");
        for n in ArmScores::NAMES {
            let _ = write!(s, " {n:>18} |");
        }
        s.push('\n');
        let _ = write!(s, "|{}|", "-".repeat(w + 2));
        for _ in ArmScores::NAMES {
            let _ = write!(s, "{}:|", "-".repeat(19));
        }
        s.push('\n');
        let _ = write!(s, "| {:<w$} |", "Real only (baseline)");
        for v in self.baseline.values() {
            let _ = write!(s, " {v:>18.4} |");
        }
        s.push('\n');
        let _ = write!(s, "| {aug_name:<w$} |");
        for (b, a) in self.baseline.values().iter().zip(self.augmented.values()) {
            let cell = format!("{a:.4} ({})", format_delta(*b, a));
            let _ = write!(s, " {cell:>18} |");
        }
        s.push('\n');
        s
    }
}

fn take(data: &Tensor<f32>, idx: &[usize]) -> Tensor<f32> {
    data.select_first(idx)
}

/// Baseline (real only) and augmented arms over `cfg.iterations` subject
/// reshuffles. `synth_falls` are synthetic fall windows in original units,
/// already cut to `cfg.window`.
pub fn run_utility_experiment(real: &UtilityData, synth_falls: &Tensor<f32>, cfg: &UtilityConfig) -> Result<UtilityReport> {
    cfg.validate()?;
    let (c, l) = (real.windows.shape()[1], real.windows.shape()[2]);
    if synth_falls.rank() != 3 || synth_falls.shape()[1..] != [c, l] {
        return Err(Error::shape(
            "utility",
            format!("synthetic windows {:?} vs real [_, {c}, {l}]", synth_falls.shape()),
        ));
    }
    let subjects = real.subject_set();
    let mut iterations = Vec::new();
    for it in 0..cfg.iterations {
        let seed = seeds::derive(cfg.seed, it as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // reshuffle until every part holds both classes
        let mut split = None;
        for _ in 0..100 {
            let s = split_subjects(&subjects, cfg.split, &mut rng)?;
            let ok = [&s.train, &s.val, &s.test].iter().all(|part| {
                let labels: BTreeSet<u8> = real
                    .subjects
                    .iter()
                    .zip(&real.labels)
                    .filter(|(id, _)| part.contains(id))
                    .map(|(_, &y)| y)
                    .collect();
                labels.len() == 2
            });
            if ok {
                split = Some(s);
                break;
            }
        }
        let split = split.ok_or_else(|| Error::data("utility", "no subject split gives both classes in every part"))?;
        split.check_disjoint()?;
        let part = |ids: &[String]| -> Vec<usize> {
            (0..real.labels.len()).filter(|&i| ids.contains(&real.subjects[i])).collect()
        };
        let (tr, va, te) = (part(&split.train), part(&split.val), part(&split.test));

        let scaler = Scaler::fit(ScalerKind::MinMax, take(&real.windows, &tr).data(), c, l)?;
        let norm = |x: Tensor<f32>| -> Result<Tensor<f32>> {
            let mut x = x;
            scaler.normalize(x.data_mut(), c, l)?;
            Ok(x)
        };
        let labels_of = |idx: &[usize]| -> Vec<u8> { idx.iter().map(|&i| real.labels[i]).collect() };
        let x_val = norm(take(&real.windows, &va))?;
        let x_test = norm(take(&real.windows, &te))?;
        let (y_val, y_test) = (labels_of(&va), labels_of(&te));

        // baseline: every real training window
        let x_base = norm(take(&real.windows, &tr))?;
        let y_base = labels_of(&tr);
        let (clf, hist_b) = train_classifier(&x_base, &y_base, &x_val, &y_val, &cfg.classifier, cfg.threshold, seeds::derive(seed, 10))?;
        let base = ArmScores::from_eval(&evaluate_classifier(&clf, &x_test, &y_test, cfg.threshold)?)?;

        // augmented: the mix fractions, capped by what is available
        let adl: Vec<usize> = tr.iter().copied().filter(|&i| real.labels[i] == 0).collect();
        let falls: Vec<usize> = tr.iter().copied().filter(|&i| real.labels[i] == 1).collect();
        let ns = synth_falls.shape()[0];
        let mut total = adl.len() as f64 / cfg.mix.adl;
        if cfg.mix.real_fall > 0.0 {
            total = total.min(falls.len() as f64 / cfg.mix.real_fall);
        }
        if cfg.mix.synth_fall > 0.0 {
            total = total.min(ns as f64 / cfg.mix.synth_fall);
        }
        let count = |f: f64| (f * total).floor() as usize;
        let mut mrng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, 20));
        let pick_adl: Vec<usize> = adl.choose_multiple(&mut mrng, count(cfg.mix.adl)).copied().collect();
        let pick_fall: Vec<usize> = falls.choose_multiple(&mut mrng, count(cfg.mix.real_fall)).copied().collect();
        let all_synth: Vec<usize> = (0..ns).collect();
        let pick_synth: Vec<usize> = all_synth.choose_multiple(&mut mrng, count(cfg.mix.synth_fall)).copied().collect();
        let real_idx: Vec<usize> = pick_adl.iter().chain(&pick_fall).copied().collect();
        let x_aug = Tensor::cat_first(&[norm(take(&real.windows, &real_idx))?, norm(take(synth_falls, &pick_synth))?])?;
        let mut y_aug = labels_of(&real_idx);
        y_aug.extend(std::iter::repeat_n(1, pick_synth.len()));
        let (clf, hist_a) = train_classifier(&x_aug, &y_aug, &x_val, &y_val, &cfg.classifier, cfg.threshold, seeds::derive(seed, 11))?;
        let aug = ArmScores::from_eval(&evaluate_classifier(&clf, &x_test, &y_test, cfg.threshold)?)?;

        iterations.push(IterationResult {
            seed,
            split,
            baseline: base,
            augmented: aug,
            train_windows: (y_base.len(), y_aug.len()),
            baseline_epochs: hist_b.len(),
            augmented_epochs: hist_a.len(),
        });
    }
    let baseline = ArmScores::mean(&iterations.iter().map(|r| r.baseline).collect::<Vec<_>>());
    let augmented = ArmScores::mean(&iterations.iter().map(|r| r.augmented).collect::<Vec<_>>());
    let mut delta_percent = [0.0; 5];
    for (k, d) in delta_percent.iter_mut().enumerate() {
        *d = percent_delta(baseline.values()[k], augmented.values()[k]);
    }
    Ok(UtilityReport {
        config: cfg.clone(),
        iterations,
        baseline,
        augmented,
        delta_percent,
    })
}
