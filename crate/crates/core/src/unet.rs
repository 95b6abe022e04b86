//! The U-Net noise predictor.
//!
//! Down path: a block per level (its output is kept as a skip), then a
//! stride-2 convolution between levels. Bottleneck: a block followed by the
//! attention layer. Up path: concatenate the skip, a block, then nearest x2
//! upsampling and a convolution between levels. Every block receives the
//! diffusion-step embedding through its own linear projection, added to its
//! input.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{adaptive_heads, AttentionConfig, AttentionLayer};
use crate::error::{Error, Result};
use crate::msconv::{MultiScaleBlock, MultiScaleConfig};
use crate::ndgrad::nn::{BatchNorm1d, Conv1d, Linear};
use crate::ndgrad::{Conv1dSpec, ParamStore, Real, Session, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub seq_len: usize,
    pub base_dim: usize,
    pub dim_mults: Vec<usize>,
    pub time_embed_dim: usize,
    #[serde(default)]
    pub msconv: MultiScaleConfig,
    #[serde(default)]
    pub attention: AttentionConfig,
    /// Multi-scale blocks; when off, plain two-convolution blocks of about
    /// the same parameter count are used.
    #[serde(default = "yes")]
    pub use_msconv: bool,
    /// Bottleneck attention; when off the bottleneck ends with its block.
    #[serde(default = "yes")]
    pub use_transformer: bool,
}

fn yes() -> bool {
    true
}

impl UNetConfig {
    pub fn new(in_channels: usize, seq_len: usize, base_dim: usize, dim_mults: Vec<usize>) -> Self {
        UNetConfig {
            in_channels,
            seq_len,
            base_dim,
            dim_mults,
            time_embed_dim: 4 * base_dim.max(8),
            msconv: MultiScaleConfig::default(),
            attention: AttentionConfig::default(),
            use_msconv: true,
            use_transformer: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_dim == 0 || self.seq_len == 0 {
            return Err(Error::config("in_channels, base_dim and seq_len must be positive"));
        }
        if self.dim_mults.is_empty() || self.dim_mults.contains(&0) {
            return Err(Error::config("dim_mults must be non-empty with entries >= 1"));
        }
        if self.time_embed_dim == 0 || !self.time_embed_dim.is_multiple_of(2) {
            return Err(Error::config(format!(
                "time_embed_dim must be even and positive, got {}",
                self.time_embed_dim
            )));
        }
        let f = self.length_factor();
        if !self.seq_len.is_multiple_of(f) {
            let down = self.seq_len / f * f;
            let up = down + f;
            return Err(Error::config(format!(
                "sequence length {} is not divisible by {f} (required by {} levels); \
                 crop to {} or pad to {}",
                self.seq_len,
                self.dim_mults.len(),
                down,
                up
            )));
        }
        self.msconv.validate()
    }

    /// `2^(levels - 1)`
    pub fn length_factor(&self) -> usize {
        1 << (self.dim_mults.len() - 1)
    }

    pub fn dims(&self) -> Vec<usize> {
        self.dim_mults.iter().map(|m| m * self.base_dim).collect()
    }

    pub fn bottleneck_len(&self) -> usize {
        self.seq_len / self.length_factor()
    }

    pub fn heads(&self) -> usize {
        let d = *self.dims().last().expect("validated");
        adaptive_heads(self.bottleneck_len(), self.attention.head_scale, d)
    }
}

/// Sinusoidal step codes: `sin(t w_i)` for the first half, `cos(t w_i)` for
/// the second, with `w_i = 10000^(-i / half)`.
pub fn sinusoidal_embedding(t: &[usize], dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::config(format!("embedding dim must be even, got {dim}")));
    }
    let half = dim / 2;
    let mut out = vec![0.0; t.len() * dim];
    for (r, &ti) in t.iter().enumerate() {
        for i in 0..half {
            let w = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            let a = ti as f64 * w;
            out[r * dim + i] = a.sin();
            out[r * dim + half + i] = a.cos();
        }
    }
    Ok(out)
}

/// Two stride-1 k=3 convolutions with a SiLU between, then batchnorm and SiLU.
#[derive(Clone, Debug)]
pub struct PlainBlock {
    pub conv0: Conv1d,
    pub conv1: Conv1d,
    pub bn: BatchNorm1d,
    pub hidden: usize,
}

/// Hidden width that gives two k=3 convolutions the same weight count as
/// the multi-scale branches: `3 H (cin + cout) = sum(k_i) cin cout`.
pub fn plain_hidden(cin: usize, cout: usize, cfg: &MultiScaleConfig) -> usize {
    let ksum: usize = cfg.scales.iter().map(|s| s.kernel).sum();
    let h = (ksum * cin * cout) as f64 / (3 * (cin + cout)) as f64;
    (h.round() as usize).max(1)
}

#[derive(Clone, Debug)]
pub enum Block {
    MultiScale(MultiScaleBlock),
    Plain(PlainBlock),
}

impl Block {
    fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cin: usize,
        cout: usize,
        cfg: &UNetConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if cfg.use_msconv {
            return Ok(Block::MultiScale(MultiScaleBlock::new(
                store, prefix, cin, cout, &cfg.msconv, rng,
            )?));
        }
        let hidden = plain_hidden(cin, cout, &cfg.msconv);
        let base = format!("{prefix}.plain");
        let same = Conv1dSpec::same(1);
        Ok(Block::Plain(PlainBlock {
            conv0: Conv1d::new(store, &format!("{base}.conv0"), cin, hidden, 3, same, true, rng)?,
            conv1: Conv1d::new(store, &format!("{base}.conv1"), hidden, cout, 3, same, true, rng)?,
            bn: BatchNorm1d::new(store, &format!("{base}.bn"), cout)?,
            hidden,
        }))
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        match self {
            Block::MultiScale(b) => b.forward(s, x),
            Block::Plain(p) => {
                let h = p.conv0.forward(s, x)?;
                let h = s.tape.silu(h);
                let h = p.conv1.forward(s, h)?;
                let h = p.bn.forward(s, h)?;
                Ok(s.tape.silu(h))
            }
        }
    }
}

/// A block with its step-embedding projection.
#[derive(Clone, Debug)]
pub struct Stage {
    pub time: Linear,
    pub block: Block,
}

impl Stage {
    fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cin: usize,
        cout: usize,
        cfg: &UNetConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Stage {
            time: Linear::new(store, &format!("{prefix}.time"), cfg.time_embed_dim, cin, true, rng)?,
            block: Block::new(store, prefix, cin, cout, cfg, rng)?,
        })
    }

    fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var, emb: Var) -> Result<Var> {
        let e = self.time.forward(s, emb)?;
        let xin = s.tape.add_bcast(x, e)?;
        self.block.forward(s, xin)
    }
}

#[derive(Clone, Debug)]
pub struct UNet {
    pub config: UNetConfig,
    pub input: Conv1d,
    pub time0: Linear,
    pub time1: Linear,
    pub down: Vec<Stage>,
    pub downsample: Vec<Conv1d>,
    pub bottleneck: Stage,
    pub attention: Option<AttentionLayer>,
    pub up: Vec<Stage>,
    pub upsample: Vec<Conv1d>,
    pub output: Conv1d,
}

/// Network layout plus its parameters.
#[derive(Clone, Debug)]
pub struct DenoiserModel<T> {
    pub net: UNet,
    pub store: ParamStore<T>,
}

impl<T: Real> DenoiserModel<T> {
    /// Build and initialize from `seed`.
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let net = UNet::build(config, &mut store, &mut rng)?;
        Ok(DenoiserModel { net, store })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.net.config
    }

    pub fn param_count(&self) -> usize {
        self.store.num_scalars()
    }

    /// Eval-mode prediction without gradient tracking.
    pub fn predict(&self, x: &Tensor<T>, t: &[usize]) -> Result<Tensor<T>> {
        let mut s = Session::inference(&self.store, false);
        let xv = s.input(x.clone());
        let y = self.net.forward(&mut s, xv, t)?;
        Ok(s.value(y).clone())
    }
}

impl UNet {
    fn build<T: Real>(config: UNetConfig, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Result<Self> {
        let dims = config.dims();
        let n = dims.len();
        let te = config.time_embed_dim;
        let same = Conv1dSpec::same(1);
        let input = Conv1d::new(store, "unet.input", config.in_channels, config.base_dim, 3, same, true, rng)?;
        let time0 = Linear::new(store, "unet.time.0", te, te, true, rng)?;
        let time1 = Linear::new(store, "unet.time.1", te, te, true, rng)?;
        let mut down = Vec::with_capacity(n);
        let mut downsample = Vec::with_capacity(n - 1);
        let mut cin = config.base_dim;
        for (i, &d) in dims.iter().enumerate() {
            down.push(Stage::new(store, &format!("unet.down.{i}"), cin, d, &config, rng)?);
            if i + 1 < n {
                downsample.push(Conv1d::new(
                    store,
                    &format!("unet.down.{i}.downsample"),
                    d,
                    d,
                    3,
                    Conv1dSpec::strided(2, 1),
                    true,
                    rng,
                )?);
            }
            cin = d;
        }
        let bd = dims[n - 1];
        let bottleneck = Stage::new(store, "unet.bottleneck", bd, bd, &config, rng)?;
        let attention = if config.use_transformer {
            Some(AttentionLayer::new(
                store,
                "unet.bottleneck.transformer",
                bd,
                config.heads(),
                &config.attention,
                rng,
            )?)
        } else {
            None
        };
        let mut up = Vec::with_capacity(n);
        let mut upsample = Vec::with_capacity(n - 1);
        for i in (0..n).rev() {
            up.push(Stage::new(store, &format!("unet.up.{i}"), 2 * dims[i], dims[i], &config, rng)?);
            if i > 0 {
                upsample.push(Conv1d::new(
                    store,
                    &format!("unet.up.{i}.upsample"),
                    dims[i],
                    dims[i - 1],
                    3,
                    same,
                    true,
                    rng,
                )?);
            }
        }
        let output = Conv1d::new(store, "unet.output", dims[0], config.in_channels, 1, same, true, rng)?;
        store.set(output.w, Tensor::zeros(vec![config.in_channels, dims[0], 1]))?;
        Ok(UNet {
            config,
            input,
            time0,
            time1,
            down,
            downsample,
            bottleneck,
            attention,
            up,
            upsample,
            output,
        })
    }

    /// Step embedding after the two-layer MLP, `[B, time_embed_dim]`.
    pub fn time_embedding<T: Real>(&self, s: &mut Session<'_, T>, t: &[usize]) -> Result<Var> {
        let te = self.config.time_embed_dim;
        let raw = sinusoidal_embedding(t, te)?;
        let e = s.input(Tensor::new(vec![t.len(), te], raw.into_iter().map(T::of).collect())?);
        let h = self.time0.forward(s, e)?;
        let h = s.tape.silu(h);
        self.time1.forward(s, h)
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var, t: &[usize]) -> Result<Var> {
        self.forward_with(s, x, t, None)
    }

    /// Forward pass; `zero_skip` replaces one down level's skip tensor with
    /// zeros (used to probe skip connectivity).
    pub fn forward_with<T: Real>(
        &self,
        s: &mut Session<'_, T>,
        x: Var,
        t: &[usize],
        zero_skip: Option<usize>,
    ) -> Result<Var> {
        let shape = s.tape.shape(x).to_vec();
        let c = &self.config;
        if shape.len() != 3 || shape[1] != c.in_channels || shape[2] != c.seq_len {
            return Err(Error::shape(
                "denoiser",
                format!(
                    "input {shape:?} does not match [B, {}, {}]",
                    c.in_channels, c.seq_len
                ),
            ));
        }
        if t.len() != shape[0] {
            return Err(Error::shape(
                "denoiser",
                format!("{} step indices for batch {}", t.len(), shape[0]),
            ));
        }
        let emb = self.time_embedding(s, t)?;
        let mut h = self.input.forward(s, x)?;
        let mut skips = Vec::with_capacity(self.down.len());
        for (i, stage) in self.down.iter().enumerate() {
            h = stage.forward(s, h, emb)?;
            let skip = if zero_skip == Some(i) {
                s.input(Tensor::zeros(s.tape.shape(h).to_vec()))
            } else {
                h
            };
            skips.push(skip);
            if let Some(ds) = self.downsample.get(i) {
                h = ds.forward(s, h)?;
            }
        }
        h = self.bottleneck.forward(s, h, emb)?;
        if let Some(att) = &self.attention {
            h = att.forward(s, h)?;
        }
        for (j, stage) in self.up.iter().enumerate() {
            let skip = skips.pop().expect("one skip per level");
            let cat = s.tape.concat(&[h, skip], 1)?;
            h = stage.forward(s, cat, emb)?;
            if let Some(us) = self.upsample.get(j) {
                let u = s.tape.upsample_nearest(h, 2)?;
                h = us.forward(s, u)?;
            }
        }
        self.output.forward(s, h)
    }
}

/// Finite-difference check of an MSE loss through the whole network, in
/// `f64`, with every parameter randomized (the output projection starts at
/// zero, which would hide most gradients). Returns the worst parameter.
pub fn full_model_gradcheck(config: UNetConfig, seed: u64) -> Result<(String, f64)> {
    use crate::ndgrad::gradcheck::{check_params, DEFAULT_STEP};
    let mut model = DenoiserModel::<f64>::new(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    model.store.randomize(0.5, &mut rng);
    let c = model.config().clone();
    let x = Tensor::randn(vec![2, c.in_channels, c.seq_len], &mut rng);
    let target = Tensor::randn(vec![2, c.in_channels, c.seq_len], &mut rng);
    let t = [seed as usize % 50, 7];
    let errs = check_params(&model.store, true, DEFAULT_STEP, |s| {
        let xv = s.input(x.clone());
        let tv = s.input(target.clone());
        let y = model.net.forward(s, xv, &t)?;
        s.tape.mse_loss(y, tv)
    })?;
    Ok(errs
        .into_iter()
        .fold((String::new(), 0.0), |a, b| if b.1 > a.1 { b } else { a }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn tiny(use_msconv: bool, use_transformer: bool) -> UNetConfig {
        UNetConfig {
            time_embed_dim: 8,
            use_msconv,
            use_transformer,
            ..UNetConfig::new(1, 8, 4, vec![1, 2])
        }
    }

    #[test]
    fn embedding_at_zero() {
        let e = sinusoidal_embedding(&[0], 6).unwrap();
        assert_eq!(e, vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        assert!(sinusoidal_embedding(&[0], 5).is_err());
    }

    #[test]
    fn embeddings_distinct_over_thousand_steps() {
        let t: Vec<usize> = (0..1000).collect();
        let e = sinusoidal_embedding(&t, 64).unwrap();
        let rows: Vec<&[f64]> = e.chunks(64).collect();
        for i in 0..rows.len() {
            for j in i + 1..rows.len() {
                let d: f64 = rows[i].iter().zip(rows[j]).map(|(a, b)| (a - b).abs()).sum();
                assert!(d > 1e-9, "{i} and {j} collide");
            }
        }
        assert_eq!(sinusoidal_embedding(&[17], 64).unwrap(), sinusoidal_embedding(&[17], 64).unwrap());
    }

    #[test]
    fn smartfall_shape() {
        let cfg = UNetConfig::new(3, 240, 8, vec![1, 2, 4, 8]);
        let m = DenoiserModel::<f32>::new(cfg, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::randn(vec![4, 3, 240], &mut rng);
        let y = m.predict(&x, &[0, 10, 500, 999]).unwrap();
        assert_eq!(y.shape(), &[4, 3, 240]);
        assert!(y.is_finite());
    }

    #[test]
    fn indivisible_length_suggests_crop() {
        let cfg = UNetConfig::new(6, 2570, 8, vec![1, 2, 4, 8]);
        let msg = DenoiserModel::<f32>::new(cfg, 0).unwrap_err().to_string();
        assert!(msg.contains("2568") && msg.contains("2576"), "{msg}");
        assert!(UNetConfig::new(6, 2576, 8, vec![1, 2, 4, 8]).validate().is_ok());
    }

    #[test]
    fn parameter_count_is_pure_and_plain_budget_close() {
        let a = DenoiserModel::<f32>::new(tiny(true, true), 1).unwrap();
        let b = DenoiserModel::<f32>::new(tiny(true, true), 2).unwrap();
        assert_eq!(a.param_count(), b.param_count());
        let cfg = UNetConfig::new(3, 64, 16, vec![1, 2, 4]);
        let ms = DenoiserModel::<f32>::new(cfg.clone(), 0).unwrap();
        let plain = DenoiserModel::<f32>::new(UNetConfig { use_msconv: false, ..cfg }, 0).unwrap();
        let ratio = plain.param_count() as f64 / ms.param_count() as f64;
        assert!((ratio - 1.0).abs() < 0.1, "{ratio}");
    }

    #[test]
    fn skip_connections_are_live() {
        let mut m = DenoiserModel::<f64>::new(tiny(true, true), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        m.store.randomize(0.5, &mut rng);
        let x = Tensor::randn(vec![2, 1, 8], &mut rng);
        let run = |skip| {
            let mut s = Session::inference(&m.store, false);
            let xv = s.input(x.clone());
            let y = m.net.forward_with(&mut s, xv, &[3, 7], skip).unwrap();
            s.value(y).clone()
        };
        let base = run(None);
        for level in 0..2 {
            assert!(run(Some(level)).max_abs_diff(&base) > 1e-6, "level {level}");
        }
    }

    #[test]
    fn full_model_gradient_check() {
        let worst = full_model_gradcheck(tiny(true, true), 11).unwrap();
        assert!(worst.1 < 1e-3, "{worst:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn output_shape_matches_input(c in 1usize..4, levels in 1usize..4, mult in 1usize..4, b in 1usize..3) {
            let factor = 1 << (levels - 1);
            let len = factor * mult * 2;
            let mults: Vec<usize> = (0..levels).map(|i| 1 << i).collect();
            let cfg = UNetConfig { time_embed_dim: 8, ..UNetConfig::new(c, len, 4, mults) };
            let m = DenoiserModel::<f32>::new(cfg, 0).unwrap();
            let x = Tensor::zeros(vec![b, c, len]);
            let y = m.predict(&x, &vec![1; b]).unwrap();
            prop_assert_eq!(y.shape(), x.shape());
        }
    }
}
