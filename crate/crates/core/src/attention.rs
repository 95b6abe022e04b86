//! Bottleneck self-attention over timesteps with a learnable residual scale.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndgrad::nn::Conv1d;
use crate::ndgrad::{Conv1dSpec, ParamId, ParamStore, Real, Session, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionConfig {
    /// Divisor `C` in the head-count rule `max(1, floor(L / C))`.
    pub head_scale: usize,
    pub lambda_init: f64,
    /// Add sinusoidal position codes to the attention input.
    #[serde(default)]
    pub positional_encoding: bool,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            head_scale: 64,
            lambda_init: 0.0,
            positional_encoding: false,
        }
    }
}

/// `h0 = max(1, floor(L / C))`, before divisor rounding.
pub fn raw_heads(len: usize, head_scale: usize) -> usize {
    (len / head_scale.max(1)).max(1)
}

/// Largest divisor of `model_dim` not exceeding `max(1, floor(L / C))`.
pub fn adaptive_heads(len: usize, head_scale: usize, model_dim: usize) -> usize {
    let h0 = raw_heads(len, head_scale);
    (1..=h0.min(model_dim.max(1)))
        .rev()
        .find(|h| model_dim.is_multiple_of(*h))
        .unwrap_or(1)
}

/// Sinusoidal codes laid out as `[D, L]`.
pub fn positional_codes(dim: usize, len: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim * len];
    for d in 0..dim {
        let i = (d / 2) as f64;
        let freq = 1.0 / 10000f64.powf(2.0 * i / dim as f64);
        for p in 0..len {
            let a = p as f64 * freq;
            out[d * len + p] = if d % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct AttentionLayer {
    pub q: Conv1d,
    pub k: Conv1d,
    pub v: Conv1d,
    pub out: Conv1d,
    pub lambda: ParamId,
    pub dim: usize,
    pub heads: usize,
    pub positional_encoding: bool,
}

impl AttentionLayer {
    /// Registers `{prefix}.q/k/v/out.{w,b}` and `{prefix}.lambda`.
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        dim: usize,
        heads: usize,
        cfg: &AttentionConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::config(format!(
                "{heads} attention heads do not divide model dim {dim}"
            )));
        }
        let mut proj = |name: &str| {
            Conv1d::new(store, &format!("{prefix}.{name}"), dim, dim, 1, Conv1dSpec::same(1), true, rng)
        };
        let q = proj("q")?;
        let k = proj("k")?;
        let v = proj("v")?;
        let out = proj("out")?;
        let lambda = store.add(
            format!("{prefix}.lambda"),
            Tensor::full(vec![1], T::of(cfg.lambda_init)),
        )?;
        Ok(AttentionLayer {
            q,
            k,
            v,
            out,
            lambda,
            dim,
            heads,
            positional_encoding: cfg.positional_encoding,
        })
    }

    /// Multi-head attention; returns the projected output and the
    /// `[B*h, L, L]` attention probabilities.
    pub fn attend<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<(Var, Var)> {
        let shape = s.tape.shape(x).to_vec();
        if shape.len() != 3 || shape[1] != self.dim {
            return Err(Error::shape(
                "self_attention",
                format!("input {shape:?} for model dim {}", self.dim),
            ));
        }
        let (b, d, l) = (shape[0], shape[1], shape[2]);
        let h = self.heads;
        let dk = d / h;
        let inp = if self.positional_encoding {
            let pe = positional_codes(d, l);
            let full = Tensor::from_fn(vec![b, d, l], |i| T::of(pe[i % (d * l)]));
            let pv = s.input(full);
            s.tape.add(x, pv)?
        } else {
            x
        };
        let q = self.q.forward(s, inp)?;
        let k = self.k.forward(s, inp)?;
        let v = self.v.forward(s, inp)?;
        let q = s.tape.reshape(q, &[b * h, dk, l])?;
        let k = s.tape.reshape(k, &[b * h, dk, l])?;
        let v = s.tape.reshape(v, &[b * h, dk, l])?;
        // scores[i, j] = q[:, i] . k[:, j]
        let scores = s.tape.bmm(q, k, true, false)?;
        let scores = s.tape.scale(scores, 1.0 / (dk as f64).sqrt());
        let probs = s.tape.softmax(scores, 2)?;
        // out[:, i] = sum_j probs[i, j] v[:, j]
        let heads = s.tape.bmm(v, probs, false, true)?;
        let merged = s.tape.reshape(heads, &[b, d, l])?;
        Ok((self.out.forward(s, merged)?, probs))
    }

    pub fn self_attention<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        Ok(self.attend(s, x)?.0)
    }

    /// `lambda * attention(x) + x`
    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let a = self.self_attention(s, x)?;
        let lam = s.param(self.lambda);
        let scaled = s.tape.mul_scalar(a, lam)?;
        s.tape.add(scaled, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn head_rule_cases() {
        assert_eq!(adaptive_heads(512, 64, 512), 8);
        assert_eq!(adaptive_heads(32, 64, 512), 1);
        assert_eq!(adaptive_heads(448, 64, 512), 4);
        assert_eq!(adaptive_heads(448, 64, 96), 6);
    }

    fn layer(dim: usize, heads: usize, seed: u64) -> (ParamStore<f64>, AttentionLayer) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let l = AttentionLayer::new(&mut store, "bot", dim, heads, &AttentionConfig::default(), &mut rng).unwrap();
        (store, l)
    }

    #[test]
    fn indivisible_heads_rejected() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(AttentionLayer::new(&mut store, "a", 6, 4, &AttentionConfig::default(), &mut rng).is_err());
    }

    #[test]
    fn zero_lambda_is_identity() {
        let (store, l) = layer(8, 2, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::<f64>::randn(vec![2, 8, 5], &mut rng);
        let mut s = Session::inference(&store, false);
        let xv = s.input(x.clone());
        let y = l.forward(&mut s, xv).unwrap();
        assert_eq!(s.value(y), &x);
    }

    #[test]
    fn single_step_returns_projected_values() {
        let (store, l) = layer(4, 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = Session::inference(&store, false);
        let x = s.input(Tensor::randn(vec![1, 4, 1], &mut rng));
        let a = l.self_attention(&mut s, x).unwrap();
        let v = l.v.forward(&mut s, x).unwrap();
        let o = l.out.forward(&mut s, v).unwrap();
        assert!(s.value(a).max_abs_diff(s.value(o)) < 1e-12);
    }

    proptest! {
        #[test]
        fn rows_are_probabilities(seed in 0u64..1000, len in 1usize..9) {
            let (store, l) = layer(4, 2, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut s = Session::inference(&store, false);
            let x = s.input(Tensor::randn(vec![2, 4, len], &mut rng));
            let (_, p) = l.attend(&mut s, x).unwrap();
            for row in s.value(p).data().chunks(len) {
                prop_assert!(row.iter().all(|&v| v >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn raw_heads_monotone(l1 in 1usize..5000, extra in 0usize..5000, c in 1usize..200) {
            prop_assert!(raw_heads(l1, c) <= raw_heads(l1 + extra, c));
        }
    }
}
