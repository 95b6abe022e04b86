//! Training loop and ancestral sampler.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndgrad::checkpoint::{self, RngState};
use crate::ndgrad::{Adam, AdamConfig, Real, Session, Tensor};
use crate::schedule::NoiseSchedule;
use crate::seeds;
use crate::unet::DenoiserModel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub checkpoint_every: u64,
    /// 32 or 64.
    #[serde(default = "default_precision")]
    pub precision: u8,
    /// Weight averaging; not supported, must stay off.
    #[serde(default)]
    pub ema: bool,
}

fn default_precision() -> u8 {
    32
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 8000,
            batch_size: 32,
            learning_rate: 8e-5,
            seed: 0,
            checkpoint_every: 500,
            precision: 32,
            ema: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if self.precision != 32 && self.precision != 64 {
            return Err(Error::config(format!("precision must be 32 or 64, got {}", self.precision)));
        }
        if self.ema {
            return Err(Error::config("weight averaging (ema) is not supported"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: u64,
    pub loss: f64,
    pub wallclock_ms: u64,
}

/// Anything that predicts the injected noise.
pub trait NoisePredictor<T: Real> {
    fn predict_noise(&self, x: &Tensor<T>, t: &[usize]) -> Result<Tensor<T>>;
}

impl<T: Real> NoisePredictor<T> for DenoiserModel<T> {
    fn predict_noise(&self, x: &Tensor<T>, t: &[usize]) -> Result<Tensor<T>> {
        self.predict(x, t)
    }
}

/// Where the trainer writes its artifacts. Unset fields are skipped.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    pub checkpoint_dir: Option<PathBuf>,
    pub loss_csv: Option<PathBuf>,
    /// Extra JSON stored in checkpoint headers (e.g. schedule, data hash).
    pub model_meta: serde_json::Value,
}

/// Training state that can be checkpointed and resumed.
pub struct Trainer<'a, T: Real> {
    pub model: &'a mut DenoiserModel<T>,
    pub adam: Adam<T>,
    pub sched: &'a NoiseSchedule,
    pub cfg: TrainConfig,
    pub iteration: u64,
    pub losses: Vec<LossRecord>,
    rng: ChaCha8Rng,
    rng_seed: u64,
}

pub fn checkpoint_name(iteration: u64) -> String {
    format!("iter_{iteration:06}.tckp")
}

impl<'a, T: Real> Trainer<'a, T> {
    pub fn new(model: &'a mut DenoiserModel<T>, sched: &'a NoiseSchedule, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let adam = Adam::new(AdamConfig::with_lr(cfg.learning_rate), &model.store);
        let rng_seed = seeds::derive_named(cfg.seed, "train");
        Ok(Trainer {
            model,
            adam,
            sched,
            cfg,
            iteration: 0,
            losses: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(rng_seed),
            rng_seed,
        })
    }

    /// Continue from a checkpoint written by this trainer.
    pub fn resume(
        model: &'a mut DenoiserModel<T>,
        sched: &'a NoiseSchedule,
        cfg: TrainConfig,
        ck: checkpoint::Checkpoint<T>,
    ) -> Result<Self> {
        checkpoint::restore_into(&mut model.store, &ck.store)?;
        let mut tr = Trainer::new(model, sched, cfg)?;
        if let Some(a) = ck.adam {
            tr.adam = a;
        }
        tr.iteration = ck.header.global_step;
        if let Some(r) = ck.header.rng {
            let pos: u128 = r
                .word_pos
                .parse()
                .map_err(|_| Error::Format("bad rng word position".into()))?;
            tr.rng = ChaCha8Rng::seed_from_u64(r.seed);
            tr.rng.set_word_pos(pos);
            tr.rng_seed = r.seed;
        }
        Ok(tr)
    }

    fn rng_state(&self) -> RngState {
        RngState {
            seed: self.rng_seed,
            word_pos: self.rng.get_word_pos().to_string(),
        }
    }

    pub fn checkpoint_bytes(&self, meta: &serde_json::Value) -> Result<Vec<u8>> {
        let model = serde_json::json!({
            "unet": self.model.config(),
            "train": self.cfg,
            "meta": meta,
        });
        checkpoint::to_bytes(
            &self.model.store,
            Some(&self.adam),
            self.iteration,
            Some(self.rng_state()),
            model,
        )
    }

    fn write_checkpoint(&self, dir: &Path, name: &str, meta: &serde_json::Value) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(name);
        let bytes = self.checkpoint_bytes(meta)?;
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// One optimization step on a random batch. Returns the loss and the
    /// sampled steps.
    pub fn step(&mut self, data: &Tensor<T>) -> Result<(f64, Vec<usize>)> {
        let n = data.shape()[0];
        let bs = self.cfg.batch_size;
        let idx: Vec<usize> = (0..bs).map(|_| self.rng.random_range(0..n)).collect();
        let t: Vec<usize> = (0..bs)
            .map(|_| self.rng.random_range(0..self.sched.steps()))
            .collect();
        let x0 = data.select_first(&idx);
        let noise = Tensor::<T>::randn(x0.shape().to_vec(), &mut self.rng);
        let xt = self.sched.q_sample(&x0, &t, &noise)?;
        let out = {
            let mut s = Session::new(&self.model.store, true);
            let xv = s.input(xt);
            let ev = s.input(noise);
            let pred = self.model.net.forward(&mut s, xv, &t)?;
            let loss = s.tape.mse_loss(pred, ev)?;
            s.backward(loss)?
        };
        if !out.loss.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite loss {} at iteration {} (t = {:?})",
                out.loss, self.iteration, t
            )));
        }
        self.adam.step(&mut self.model.store, &out.grads)?;
        self.model.store.apply_bn_updates(&out.bn_updates);
        self.iteration += 1;
        Ok((out.loss, t))
    }

    /// Train until `cfg.iterations`, writing checkpoints and the loss trace.
    /// On failure an emergency checkpoint is written before returning.
    pub fn run(&mut self, data: &Tensor<T>, outputs: &TrainOutputs) -> Result<()> {
        let shape = data.shape();
        let c = self.model.config();
        if shape.len() != 3 || shape[1] != c.in_channels || shape[2] != c.seq_len || shape[0] == 0 {
            return Err(Error::shape(
                "train",
                format!(
                    "windows {shape:?} do not match model input [N, {}, {}]",
                    c.in_channels, c.seq_len
                ),
            ));
        }
        let mut csv = match &outputs.loss_csv {
            Some(p) => {
                if let Some(parent) = p.parent() {
                    std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
                }
                let fresh = self.iteration == 0 || !p.exists();
                let f = std::fs::OpenOptions::new()
                    .create(true)
                    .append(!fresh)
                    .write(true)
                    .truncate(fresh)
                    .open(p)
                    .map_err(|e| Error::io(p, e))?;
                let mut w = std::io::BufWriter::new(f);
                if fresh {
                    writeln!(w, "iteration,loss,wallclock_ms").map_err(|e| Error::io(p, e))?;
                }
                Some((w, p.clone()))
            }
            None => None,
        };
        let start = Instant::now();
        while self.iteration < self.cfg.iterations {
            let it = self.iteration;
            match self.step(data) {
                Ok((loss, _)) => {
                    let rec = LossRecord {
                        iteration: it,
                        loss,
                        wallclock_ms: start.elapsed().as_millis() as u64,
                    };
                    if let Some((w, p)) = csv.as_mut() {
                        writeln!(w, "{},{},{}", rec.iteration, rec.loss, rec.wallclock_ms)
                            .map_err(|e| Error::io(p.as_path(), e))?;
                    }
                    self.losses.push(rec);
                }
                Err(e) => {
                    if let Some(dir) = &outputs.checkpoint_dir {
                        let _ = self.write_checkpoint(dir, "emergency.tckp", &outputs.model_meta);
                    }
                    return Err(e);
                }
            }
            let every = self.cfg.checkpoint_every;
            if let Some(dir) = &outputs.checkpoint_dir {
                if every > 0 && self.iteration.is_multiple_of(every) && self.iteration < self.cfg.iterations {
                    self.write_checkpoint(dir, &checkpoint_name(self.iteration), &outputs.model_meta)?;
                }
            }
        }
        if let Some((mut w, p)) = csv {
            w.flush().map_err(|e| Error::io(p.as_path(), e))?;
        }
        if let Some(dir) = &outputs.checkpoint_dir {
            self.write_checkpoint(dir, &checkpoint_name(self.iteration), &outputs.model_meta)?;
            self.write_checkpoint(dir, "last.tckp", &outputs.model_meta)?;
        }
        Ok(())
    }
}

/// Convenience wrapper: train from scratch without writing anything.
pub fn train<T: Real>(
    model: &mut DenoiserModel<T>,
    data: &Tensor<T>,
    sched: &NoiseSchedule,
    cfg: TrainConfig,
) -> Result<Vec<LossRecord>> {
    let mut tr = Trainer::new(model, sched, cfg)?;
    tr.run(data, &TrainOutputs::default())?;
    Ok(tr.losses)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRequest {
    pub count: usize,
    pub channels: usize,
    pub length: usize,
    pub seed: u64,
}

pub const SHARD_SIZE: usize = 64;

/// Ancestral sampling from `x_T ~ N(0, I)` down to `x_0`.
///
/// The batch is generated in shards of [`SHARD_SIZE`]; shard `k` draws from
/// its own stream seeded with `derive(seed, k)`, so results do not depend on
/// how shards are scheduled.
pub fn sample<T: Real, P: NoisePredictor<T> + ?Sized>(
    model: &P,
    sched: &NoiseSchedule,
    req: &SampleRequest,
) -> Result<Tensor<T>> {
    if req.count == 0 || req.channels == 0 || req.length == 0 {
        return Err(Error::config("sample request needs positive count, channels and length"));
    }
    let mut shards = Vec::new();
    let mut done = 0;
    let mut k = 0u64;
    while done < req.count {
        let n = SHARD_SIZE.min(req.count - done);
        shards.push(sample_shard(model, sched, n, req.channels, req.length, seeds::derive(req.seed, k))?);
        done += n;
        k += 1;
    }
    Tensor::cat_first(&shards)
}

fn sample_shard<T: Real, P: NoisePredictor<T> + ?Sized>(
    model: &P,
    sched: &NoiseSchedule,
    n: usize,
    c: usize,
    l: usize,
    seed: u64,
) -> Result<Tensor<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Tensor::<T>::randn(vec![n, c, l], &mut rng);
    for t in (0..sched.steps()).rev() {
        let co = sched.reverse_coeffs(t)?;
        let eps = model.predict_noise(&x, &vec![t; n])?;
        if eps.shape() != x.shape() {
            return Err(Error::shape(
                "sample",
                format!("predictor returned {:?} for {:?}", eps.shape(), x.shape()),
            ));
        }
        let z = if t > 0 {
            Some(Tensor::<T>::randn(vec![n, c, l], &mut rng))
        } else {
            None
        };
        let (cx, ce, sg) = (T::of(co.c_xt), T::of(co.c_eps), T::of(co.sigma));
        let xd = x.data_mut();
        for (i, v) in xd.iter_mut().enumerate() {
            let mut nv = cx * *v - ce * eps.data()[i];
            if let Some(z) = &z {
                nv += sg * z.data()[i];
            }
            *v = nv;
        }
        if !x.is_finite() {
            return Err(Error::Numerical(format!("non-finite sample at step t = {t}")));
        }
    }
    Ok(x)
}

/// The exact noise predictor when data are i.i.d. `N(0, 1)`:
/// `E[eps | x_t] = sqrt(1 - abar_t) x_t`.
pub struct GaussianOracle<'a> {
    pub sched: &'a NoiseSchedule,
}

impl<T: Real> NoisePredictor<T> for GaussianOracle<'_> {
    fn predict_noise(&self, x: &Tensor<T>, t: &[usize]) -> Result<Tensor<T>> {
        let b = x.shape()[0];
        let inner = x.numel() / b.max(1);
        let mut out = x.clone();
        for (r, &ti) in t.iter().enumerate() {
            let k = (1.0 - self.sched.alpha_bar()[ti]).sqrt();
            for v in &mut out.data_mut()[r * inner..(r + 1) * inner] {
                *v = T::of(k * v.as_f64());
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::unet::UNetConfig;
    use std::cell::RefCell;

    struct Zero;
    impl NoisePredictor<f64> for Zero {
        fn predict_noise(&self, x: &Tensor<f64>, _: &[usize]) -> Result<Tensor<f64>> {
            Ok(Tensor::zeros(x.shape().to_vec()))
        }
    }

    struct Recorder(RefCell<Vec<usize>>, usize);
    impl NoisePredictor<f64> for Recorder {
        fn predict_noise(&self, x: &Tensor<f64>, t: &[usize]) -> Result<Tensor<f64>> {
            assert!(t.iter().all(|&v| v < self.1));
            self.0.borrow_mut().push(t[0]);
            Ok(Tensor::zeros(x.shape().to_vec()))
        }
    }

    #[test]
    fn single_step_zero_predictor_divides_by_sqrt_alpha() {
        let s = NoiseSchedule::from_betas(vec![0.3]).unwrap();
        let req = SampleRequest {
            count: 3,
            channels: 1,
            length: 2,
            seed: 5,
        };
        let out = sample(&Zero, &s, &req).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(5, 0));
        let x1 = Tensor::<f64>::randn(vec![3, 1, 2], &mut rng);
        for (a, b) in out.data().iter().zip(x1.data()) {
            assert!((a - b / 0.7f64.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn sampler_visits_steps_in_descending_order() {
        for steps in [1, 2, 5, 50] {
            let s = NoiseSchedule::linear(steps, 1e-3, 0.2).unwrap();
            let rec = Recorder(RefCell::new(Vec::new()), steps);
            let req = SampleRequest {
                count: 2,
                channels: 1,
                length: 3,
                seed: 0,
            };
            sample(&rec, &s, &req).unwrap();
            let want: Vec<usize> = (0..steps).rev().collect();
            assert_eq!(*rec.0.borrow(), want);
        }
    }

    #[test]
    fn sharding_is_deterministic() {
        let s = NoiseSchedule::linear(10, 1e-3, 0.2).unwrap();
        let oracle = GaussianOracle { sched: &s };
        let req = SampleRequest {
            count: 130,
            channels: 2,
            length: 3,
            seed: 9,
        };
        let a: Tensor<f32> = sample(&oracle, &s, &req).unwrap();
        let b: Tensor<f32> = sample(&oracle, &s, &req).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[130, 2, 3]);
    }

    fn tiny_model() -> DenoiserModel<f32> {
        let cfg = UNetConfig {
            time_embed_dim: 16,
            ..UNetConfig::new(1, 16, 8, vec![1, 2])
        };
        DenoiserModel::new(cfg, 3).unwrap()
    }

    #[test]
    fn training_is_deterministic_and_initial_loss_near_one() {
        let s = NoiseSchedule::linear(50, 1e-3, 0.2).unwrap();
        let data = Tensor::<f32>::zeros(vec![16, 1, 16]);
        let cfg = TrainConfig {
            iterations: 20,
            batch_size: 8,
            learning_rate: 1e-3,
            ..Default::default()
        };
        let mut m1 = tiny_model();
        let l1 = train(&mut m1, &data, &s, cfg.clone()).unwrap();
        let mut m2 = tiny_model();
        let l2 = train(&mut m2, &data, &s, cfg).unwrap();
        let a: Vec<f64> = l1.iter().map(|r| r.loss).collect();
        let b: Vec<f64> = l2.iter().map(|r| r.loss).collect();
        assert_eq!(a, b);
        assert!((a[0] - 1.0).abs() < 0.15, "{}", a[0]);
        assert_eq!(m1.store.values(), m2.store.values());
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let s = NoiseSchedule::linear(50, 1e-3, 0.2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data = Tensor::<f32>::randn(vec![16, 1, 16], &mut rng);
        let cfg = TrainConfig {
            iterations: 12,
            batch_size: 4,
            learning_rate: 1e-3,
            ..Default::default()
        };
        let mut full = tiny_model();
        let losses = train(&mut full, &data, &s, cfg.clone()).unwrap();

        let mut part = tiny_model();
        let bytes = {
            let mut tr = Trainer::new(&mut part, &s, TrainConfig { iterations: 5, ..cfg.clone() }).unwrap();
            tr.run(&data, &TrainOutputs::default()).unwrap();
            tr.checkpoint_bytes(&serde_json::Value::Null).unwrap()
        };
        let ck = checkpoint::from_bytes::<f32>(&bytes).unwrap();
        let mut fresh = tiny_model();
        let mut tr = Trainer::resume(&mut fresh, &s, cfg, ck).unwrap();
        tr.run(&data, &TrainOutputs::default()).unwrap();
        assert_eq!(tr.losses.last().unwrap().loss, losses.last().unwrap().loss);
        drop(tr);
        assert_eq!(fresh.store.values(), full.store.values());
    }

    #[test]
    fn zero_data_loss_halves_within_500_iterations() {
        let s = NoiseSchedule::linear(50, 1e-3, 0.2).unwrap();
        let data = Tensor::<f32>::zeros(vec![16, 1, 16]);
        let cfg = TrainConfig {
            iterations: 500,
            batch_size: 8,
            learning_rate: 2e-3,
            ..Default::default()
        };
        let mut m = tiny_model();
        let l: Vec<f64> = train(&mut m, &data, &s, cfg).unwrap().iter().map(|r| r.loss).collect();
        let head = l[..100].iter().sum::<f64>() / 100.0;
        let tail = l[400..].iter().sum::<f64>() / 100.0;
        assert!(tail < 0.5 * l[0], "initial {} final {}", l[0], tail);
        assert!(tail < head);
    }

    #[test]
    fn oracle_sampler_recovers_standard_normal() {
        let s = NoiseSchedule::linear(50, 1e-3, 0.2).unwrap();
        let oracle = GaussianOracle { sched: &s };
        let n = 10_000;
        let req = SampleRequest {
            count: n,
            channels: 1,
            length: 1,
            seed: 11,
        };
        let x: Tensor<f64> = sample(&oracle, &s, &req).unwrap();
        let mean = x.data().iter().sum::<f64>() / n as f64;
        let var = x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!(mean.abs() < 3.0 / (n as f64).sqrt(), "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn rejects_bad_config() {
        let cfg = TrainConfig {
            ema: true,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig {
            precision: 16,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
