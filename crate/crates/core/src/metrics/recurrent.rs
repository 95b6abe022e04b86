//! Discriminative and predictive scores from small recurrent networks.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndgrad::nn::{unstack_time, Gru, Linear};
use crate::ndgrad::{Adam, AdamConfig, ParamStore, Session, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminativeConfig {
    pub hidden: usize,
    pub layers: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub train_fraction: f64,
}

impl Default for DiscriminativeConfig {
    fn default() -> Self {
        DiscriminativeConfig {
            hidden: 32,
            layers: 2,
            steps: 500,
            learning_rate: 1e-3,
            batch_size: 64,
            train_fraction: 0.7,
        }
    }
}

pub const MIN_DISCRIMINATIVE_WINDOWS: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictiveConfig {
    pub hidden: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for PredictiveConfig {
    fn default() -> Self {
        PredictiveConfig {
            hidden: 32,
            steps: 500,
            learning_rate: 1e-3,
            batch_size: 64,
        }
    }
}

fn dims(x: &Tensor<f32>, what: &str) -> Result<(usize, usize, usize)> {
    match x.shape() {
        &[b, c, l] => Ok((b, c, l)),
        s => Err(Error::shape("metrics", format!("{what} must be [B, C, L], got {s:?}"))),
    }
}

fn minibatch(rng: &mut ChaCha8Rng, pool: &[usize], size: usize) -> Vec<usize> {
    pool.choose_multiple(rng, size.min(pool.len())).copied().collect()
}

struct Classifier {
    grus: Vec<Gru>,
    head: Linear,
}

impl Classifier {
    fn new(store: &mut ParamStore<f32>, c: usize, cfg: &DiscriminativeConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut grus = Vec::new();
        for i in 0..cfg.layers.max(1) {
            let input = if i == 0 { c } else { cfg.hidden };
            grus.push(Gru::new(store, &format!("disc.gru{i}"), input, cfg.hidden, rng)?);
        }
        let head = Linear::new(store, "disc.head", cfg.hidden, 1, true, rng)?;
        Ok(Classifier { grus, head })
    }

    /// Probability of "real" per window, `[B, 1]`.
    fn forward(&self, s: &mut Session<'_, f32>, x: Tensor<f32>) -> Result<crate::ndgrad::Var> {
        let xv = s.input(x);
        let mut seq = unstack_time(s, xv)?;
        for g in &self.grus {
            seq = g.forward(s, &seq)?;
        }
        let last = *seq.last().expect("non-empty sequence");
        let logit = self.head.forward(s, last)?;
        Ok(s.tape.sigmoid(logit))
    }
}

/// Held-out accuracy of a recurrent classifier separating real (label 1)
/// from synthetic (label 0) windows. 0.5 means indistinguishable.
///
/// Uses the first `min(n_real, n_synth)` windows of each side and a
/// stratified train/test split.
pub fn discriminative_score(
    real: &Tensor<f32>,
    synth: &Tensor<f32>,
    cfg: &DiscriminativeConfig,
    seed: u64,
) -> Result<f64> {
    let (nr, c, l) = dims(real, "real")?;
    let (ns, cs, ls) = dims(synth, "synth")?;
    if (c, l) != (cs, ls) {
        return Err(Error::shape(
            "discriminative",
            format!("real {:?} vs synth {:?}", real.shape(), synth.shape()),
        ));
    }
    let n = nr.min(ns);
    if n < MIN_DISCRIMINATIVE_WINDOWS {
        return Err(Error::data(
            "discriminative",
            format!("needs at least {MIN_DISCRIMINATIVE_WINDOWS} windows per side, got {n}"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let all = Tensor::cat_first(&[real.narrow_first(0, n), synth.narrow_first(0, n)])?;
    let labels: Vec<f32> = (0..2 * n).map(|i| if i < n { 1.0 } else { 0.0 }).collect();
    let n_train = ((n as f64 * cfg.train_fraction).round() as usize).clamp(1, n - 1);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for offset in [0, n] {
        let mut idx: Vec<usize> = (offset..offset + n).collect();
        idx.shuffle(&mut rng);
        train.extend_from_slice(&idx[..n_train]);
        test.extend_from_slice(&idx[n_train..]);
    }

    let mut store = ParamStore::new();
    let net = Classifier::new(&mut store, c, cfg, &mut rng)?;
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.learning_rate), &store);
    for _ in 0..cfg.steps {
        let b = minibatch(&mut rng, &train, cfg.batch_size);
        let y = Tensor::new(vec![b.len(), 1], b.iter().map(|&i| labels[i]).collect())?;
        let grads = {
            let mut s = Session::new(&store, true);
            let p = net.forward(&mut s, all.select_first(&b))?;
            let yv = s.input(y);
            let loss = s.tape.bce_loss(p, yv)?;
            s.backward(loss)?
        };
        adam.step(&mut store, &grads.grads)?;
    }

    let mut s = Session::inference(&store, false);
    let p = net.forward(&mut s, all.select_first(&test))?;
    let correct = s
        .value(p)
        .data()
        .iter()
        .zip(&test)
        .filter(|(&p, &i)| (p >= 0.5) == (labels[i] == 1.0))
        .count();
    Ok(correct as f64 / test.len() as f64)
}

struct Regressor {
    gru: Gru,
    head: Linear,
}

impl Regressor {
    /// Predictions for steps `1..L`, time-major `[(L-1) * B, C]`.
    fn forward(&self, s: &mut Session<'_, f32>, x: Tensor<f32>) -> Result<crate::ndgrad::Var> {
        let l = x.shape()[2];
        let xv = s.input(x);
        let xin = s.tape.slice(xv, 2, 0, l - 1)?;
        let seq = unstack_time(s, xin)?;
        let hs = self.gru.forward(s, &seq)?;
        let h = s.tape.concat(&hs, 0)?;
        self.head.forward(s, h)
    }
}

/// Targets `x[:, :, 1..]` in the regressor's time-major layout.
fn next_step_targets(x: &Tensor<f32>) -> Tensor<f32> {
    let (b, c, l) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    Tensor::from_fn(vec![(l - 1) * b, c], |k| {
        let (row, ch) = (k / c, k % c);
        let (t, i) = (row / b + 1, row % b);
        x.data()[(i * c + ch) * l + t]
    })
}

/// Train-on-synthetic, test-on-real: mean absolute next-step error on
/// `real_eval` of a one-layer recurrent regressor fit to `synth_train`.
pub fn predictive_score(
    real_eval: &Tensor<f32>,
    synth_train: &Tensor<f32>,
    cfg: &PredictiveConfig,
    seed: u64,
) -> Result<f64> {
    let (_, c, l) = dims(real_eval, "real")?;
    let (ns, cs, ls) = dims(synth_train, "synth")?;
    if (c, l) != (cs, ls) {
        return Err(Error::shape(
            "predictive",
            format!("real {:?} vs synth {:?}", real_eval.shape(), synth_train.shape()),
        ));
    }
    if l < 2 {
        return Err(Error::data("predictive", format!("windows need length >= 2, got {l}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let net = Regressor {
        gru: Gru::new(&mut store, "pred.gru", c, cfg.hidden, &mut rng)?,
        head: Linear::new(&mut store, "pred.head", cfg.hidden, c, true, &mut rng)?,
    };
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.learning_rate), &store);
    let pool: Vec<usize> = (0..ns).collect();
    for _ in 0..cfg.steps {
        let x = synth_train.select_first(&minibatch(&mut rng, &pool, cfg.batch_size));
        let target = next_step_targets(&x);
        let grads = {
            let mut s = Session::new(&store, true);
            let pred = net.forward(&mut s, x)?;
            let tv = s.input(target);
            let loss = s.tape.l1_loss(pred, tv)?;
            s.backward(loss)?
        };
        adam.step(&mut store, &grads.grads)?;
    }

    let (mut err, mut count) = (0.0, 0usize);
    for chunk in (0..real_eval.shape()[0]).collect::<Vec<_>>().chunks(256) {
        let x = real_eval.select_first(chunk);
        let target = next_step_targets(&x);
        let mut s = Session::inference(&store, false);
        let pred = net.forward(&mut s, x)?;
        for (p, t) in s.value(pred).data().iter().zip(target.data()) {
            err += (*p as f64 - *t as f64).abs();
        }
        count += target.numel();
    }
    Ok(err / count as f64)
}
