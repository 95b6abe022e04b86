//! Causal dilated-convolution context encoder with a contrastive objective.

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndgrad::nn::{Conv1d, Linear};
use crate::ndgrad::{checkpoint, Adam, AdamConfig, Conv1dSpec, ParamStore, Session, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub hidden: usize,
    pub embed_dim: usize,
    /// Dilations of the stacked causal convolutions.
    pub dilations: Vec<usize>,
    pub kernel: usize,
    pub steps: usize,
    pub learning_rate: f64,
    /// Windows per contrastive batch (each contributes two crops).
    pub batch_size: usize,
    pub temperature: f64,
    /// Crop length as a fraction of the window.
    pub crop_fraction: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            hidden: 32,
            embed_dim: 16,
            dilations: vec![1, 2, 4, 8],
            kernel: 3,
            steps: 1000,
            learning_rate: 1e-3,
            batch_size: 32,
            temperature: 0.1,
            crop_fraction: 0.8,
        }
    }
}

pub const MIN_ENCODER_WINDOWS: usize = 64;

#[derive(Clone, Debug)]
pub struct ContextEncoder {
    pub config: EncoderConfig,
    pub channels: usize,
    pub store: ParamStore<f32>,
    convs: Vec<Conv1d>,
    head: Linear,
}

impl ContextEncoder {
    pub fn new(channels: usize, config: EncoderConfig, seed: u64) -> Result<Self> {
        if config.dilations.is_empty() || config.hidden == 0 || config.embed_dim == 0 {
            return Err(Error::config("encoder needs dilations, hidden and embed_dim"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut convs = Vec::new();
        for (i, &d) in config.dilations.iter().enumerate() {
            let cin = if i == 0 { channels } else { config.hidden };
            convs.push(Conv1d::new(
                &mut store,
                &format!("enc.conv{i}"),
                cin,
                config.hidden,
                config.kernel,
                Conv1dSpec::causal(d),
                true,
                &mut rng,
            )?);
        }
        let head = Linear::new(&mut store, "enc.head", config.hidden, config.embed_dim, true, &mut rng)?;
        Ok(ContextEncoder {
            config,
            channels,
            store,
            convs,
            head,
        })
    }

    fn forward(&self, s: &mut Session<'_, f32>, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, conv) in self.convs.iter().enumerate() {
            let y = conv.forward(s, h)?;
            let y = s.tape.silu(y);
            h = if i == 0 { y } else { s.tape.add(y, h)? };
        }
        let pooled = s.tape.mean_axis(h, 2)?;
        self.head.forward(s, pooled)
    }

    /// Embeddings of `[B, C, L]` windows as rows of a `[B, E]` matrix.
    pub fn embed(&self, x: &Tensor<f32>) -> Result<DMatrix<f64>> {
        if x.rank() != 3 || x.shape()[1] != self.channels {
            return Err(Error::shape(
                "context encoder",
                format!("expected [B, {}, L], got {:?}", self.channels, x.shape()),
            ));
        }
        let b = x.shape()[0];
        let e = self.config.embed_dim;
        let mut out = DMatrix::zeros(b, e);
        let mut row = 0;
        for chunk in (0..b).collect::<Vec<_>>().chunks(256) {
            let mut s = Session::inference(&self.store, false);
            let xv = s.input(x.select_first(chunk));
            let z = self.forward(&mut s, xv)?;
            for (k, v) in s.value(z).data().iter().enumerate() {
                out[(row + k / e, k % e)] = *v as f64;
            }
            row += chunk.len();
        }
        Ok(out)
    }

    /// Hash of the encoder weights.
    pub fn hash(&self) -> String {
        let mut bytes = Vec::new();
        for (name, v) in self.store.names().iter().zip(self.store.values()) {
            bytes.extend_from_slice(name.as_bytes());
            for x in v.data() {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
        checkpoint::sha256_hex(&bytes)
    }
}

fn crops(x: &Tensor<f32>, idx: &[usize], starts: &[usize], len: usize) -> Tensor<f32> {
    let (c, l) = (x.shape()[1], x.shape()[2]);
    let mut out = Vec::with_capacity(idx.len() * c * len);
    for (&i, &s) in idx.iter().zip(starts) {
        for ch in 0..c {
            let o = (i * c + ch) * l + s;
            out.extend_from_slice(&x.data()[o..o + len]);
        }
    }
    Tensor::new(vec![idx.len(), c, len], out).expect("crop shape")
}

/// Train on real windows: two random overlapping crops of a window are a
/// positive pair, crops of other windows in the batch are negatives
/// (normalized temperature-scaled cross-entropy).
pub fn train_context_encoder(real: &Tensor<f32>, config: EncoderConfig, seed: u64) -> Result<ContextEncoder> {
    if real.rank() != 3 {
        return Err(Error::shape("context encoder", format!("expected [B, C, L], got {:?}", real.shape())));
    }
    let (n, c, l) = (real.shape()[0], real.shape()[1], real.shape()[2]);
    if n < MIN_ENCODER_WINDOWS {
        return Err(Error::data(
            "context encoder",
            format!("needs at least {MIN_ENCODER_WINDOWS} windows, got {n}"),
        ));
    }
    let mut enc = ContextEncoder::new(c, config, seed)?;
    let cfg = enc.config.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(crate::seeds::derive(seed, 1));
    let crop_len = ((l as f64 * cfg.crop_fraction).round() as usize).clamp(1, l);
    let bs = cfg.batch_size.clamp(2, n);
    let targets: Vec<usize> = (0..2 * bs).map(|i| (i + bs) % (2 * bs)).collect();
    let mut mask = Tensor::<f32>::zeros(vec![2 * bs, 2 * bs]);
    for i in 0..2 * bs {
        mask.set(&[i, i], -1e9);
    }
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.learning_rate), &enc.store);
    for _ in 0..cfg.steps {
        let idx = sample(&mut rng, n, bs).into_vec();
        let s1: Vec<usize> = idx.iter().map(|_| rng.random_range(0..=l - crop_len)).collect();
        let s2: Vec<usize> = idx.iter().map(|_| rng.random_range(0..=l - crop_len)).collect();
        let x = Tensor::cat_first(&[crops(real, &idx, &s1, crop_len), crops(real, &idx, &s2, crop_len)])?;
        let grads = {
            let mut s = Session::new(&enc.store, true);
            let xv = s.input(x);
            let z = enc.forward(&mut s, xv)?;
            let z = s.tape.l2_normalize(z)?;
            let z3 = s.tape.reshape(z, &[1, 2 * bs, cfg.embed_dim])?;
            let sim = s.tape.bmm(z3, z3, false, true)?;
            let sim = s.tape.reshape(sim, &[2 * bs, 2 * bs])?;
            let sim = s.tape.scale(sim, 1.0 / cfg.temperature);
            let m = s.input(mask.clone());
            let logits = s.tape.add(sim, m)?;
            let loss = s.tape.cross_entropy(logits, &targets)?;
            s.backward(loss)?
        };
        adam.step(&mut enc.store, &grads.grads)?;
    }
    Ok(enc)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sines(n: usize, l: usize, seed: u64) -> Tensor<f32> {
        let v = crate::dataio::toy::generate(crate::dataio::ToyKind::Sines, n, l, 2, seed).unwrap();
        Tensor::new(vec![n, 2, l], v).unwrap()
    }

    fn cosine(a: &DMatrix<f64>, i: usize, b: &DMatrix<f64>, j: usize) -> f64 {
        let (x, y) = (a.row(i), b.row(j));
        x.dot(&y) / (x.norm() * y.norm())
    }

    #[test]
    fn untrained_embeddings_are_finite_and_vary() {
        let enc = ContextEncoder::new(2, EncoderConfig::default(), 0).unwrap();
        let e = enc.embed(&sines(10, 32, 1)).unwrap();
        assert!(e.iter().all(|v| v.is_finite()));
        assert!((e.row(0) - e.row(1)).norm() > 1e-6);
    }

    #[test]
    fn trained_encoder_groups_overlapping_crops() {
        let cfg = EncoderConfig {
            steps: 150,
            ..Default::default()
        };
        let l = 40;
        let data = sines(128, l, 2);
        let enc = train_context_encoder(&data, cfg.clone(), 3).unwrap();
        assert_eq!(enc.hash(), train_context_encoder(&data, cfg, 3).unwrap().hash());

        let n = 100;
        let idx: Vec<usize> = (0..n).collect();
        let full = enc.embed(&crops(&data, &idx, &vec![0; n], l)).unwrap();
        let crop = enc.embed(&crops(&data, &idx, &vec![l / 10; n], l - l / 10)).unwrap();
        let mut ok = 0;
        for i in 0..n {
            let other = (i + 37) % n;
            if cosine(&full, i, &crop, i) > cosine(&full, i, &full, other) {
                ok += 1;
            }
        }
        assert!(ok as f64 >= 0.9 * n as f64, "{ok}/{n}");
    }

    #[test]
    fn too_few_windows() {
        assert!(train_context_encoder(&sines(10, 16, 0), EncoderConfig::default(), 0).is_err());
    }
}
