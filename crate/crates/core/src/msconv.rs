//! Multi-scale convolution block: parallel dilated convolutions mixed by
//! softmax weights, followed by batch normalization and SiLU.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndgrad::nn::{BatchNorm1d, Conv1d};
use crate::ndgrad::{Conv1dSpec, ParamId, ParamStore, Real, Session, Tensor, Var};

/// One branch: odd kernel size and dilation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scale {
    pub kernel: usize,
    pub dilation: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultiScaleConfig {
    pub scales: Vec<Scale>,
}

impl Default for MultiScaleConfig {
    fn default() -> Self {
        MultiScaleConfig {
            scales: vec![
                Scale { kernel: 3, dilation: 1 },
                Scale { kernel: 5, dilation: 2 },
                Scale { kernel: 7, dilation: 4 },
            ],
        }
    }
}

impl MultiScaleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(Error::config("multi-scale block needs at least one scale"));
        }
        for s in &self.scales {
            if s.kernel % 2 == 0 || s.dilation == 0 {
                return Err(Error::config(format!(
                    "scale kernel must be odd and dilation positive, got k={} d={}",
                    s.kernel, s.dilation
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct MultiScaleBlock {
    pub convs: Vec<Conv1d>,
    pub beta: ParamId,
    pub bn: BatchNorm1d,
    pub cin: usize,
    pub cout: usize,
}

impl MultiScaleBlock {
    /// Parameters are registered under `{prefix}.msconv.*`.
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cin: usize,
        cout: usize,
        cfg: &MultiScaleConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let base = format!("{prefix}.msconv");
        let convs = cfg
            .scales
            .iter()
            .enumerate()
            .map(|(i, s)| {
                Conv1d::new(
                    store,
                    &format!("{base}.scale{i}"),
                    cin,
                    cout,
                    s.kernel,
                    Conv1dSpec::same(s.dilation),
                    true,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let beta = store.add(format!("{base}.beta"), Tensor::zeros(vec![cfg.scales.len()]))?;
        let bn = BatchNorm1d::new(store, &format!("{base}.bn"), cout)?;
        Ok(MultiScaleBlock {
            convs,
            beta,
            bn,
            cin,
            cout,
        })
    }

    /// Softmax of the current scale logits.
    pub fn attention_weights<T: Real>(&self, store: &ParamStore<T>) -> Vec<f64> {
        softmax(&store.get(self.beta).to_f64_vec())
    }

    /// Softmax-weighted sum of the branch outputs, before normalization.
    pub fn aggregate<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let cin = s.tape.shape(x).get(1).copied().unwrap_or(0);
        if s.tape.shape(x).len() != 3 || cin != self.cin {
            return Err(Error::shape(
                "msconv",
                format!("input {:?} for a block expecting {} channels", s.tape.shape(x), self.cin),
            ));
        }
        let beta = s.param(self.beta);
        let alpha = s.tape.softmax(beta, 0)?;
        let mut acc: Option<Var> = None;
        for (i, conv) in self.convs.iter().enumerate() {
            let y = conv.forward(s, x)?;
            let a = s.tape.slice(alpha, 0, i, i + 1)?;
            let ya = s.tape.mul_scalar(y, a)?;
            acc = Some(match acc {
                Some(prev) => s.tape.add(prev, ya)?,
                None => ya,
            });
        }
        Ok(acc.expect("at least one scale"))
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let agg = self.aggregate(s, x)?;
        let y = self.bn.forward(s, agg)?;
        Ok(s.tape.silu(y))
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn block(scales: &[(usize, usize)], cin: usize, cout: usize) -> (ParamStore<f64>, MultiScaleBlock) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let cfg = MultiScaleConfig {
            scales: scales
                .iter()
                .map(|&(kernel, dilation)| Scale { kernel, dilation })
                .collect(),
        };
        let b = MultiScaleBlock::new(&mut store, "blk", cin, cout, &cfg, &mut rng).unwrap();
        (store, b)
    }

    #[test]
    fn weights_hand_values() {
        let w = softmax(&[0.0, 0.0]);
        assert_eq!(w, vec![0.5, 0.5]);
        let w = softmax(&[2f64.ln(), 0.0]);
        assert!((w[0] - 2.0 / 3.0).abs() < 1e-15 && (w[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn identical_unit_kernels_aggregate_to_scaled_input() {
        let (mut store, b) = block(&[(1, 1), (1, 1), (1, 1)], 1, 1);
        for c in &b.convs {
            store.set(c.w, Tensor::full(vec![1, 1, 1], 0.7)).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::randn(vec![2, 1, 6], &mut rng);
        let mut s = Session::inference(&store, true);
        let xv = s.input(x.clone());
        let y = b.aggregate(&mut s, xv).unwrap();
        for (a, &v) in s.value(y).data().iter().zip(x.data()) {
            assert!((a - 0.7 * v).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_wrong_channels_and_even_kernel() {
        let (store, b) = block(&[(3, 1)], 2, 4);
        let mut s = Session::inference(&store, true);
        let x = s.input(Tensor::zeros(vec![1, 3, 8]));
        assert!(b.forward(&mut s, x).is_err());
        let cfg = MultiScaleConfig {
            scales: vec![Scale { kernel: 4, dilation: 1 }],
        };
        assert!(cfg.validate().is_err());
        assert!(MultiScaleConfig { scales: vec![] }.validate().is_err());
    }

    #[test]
    fn beta_receives_gradient() {
        let (store, b) = block(&[(3, 1), (5, 2), (7, 4)], 2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut s = Session::new(&store, true);
        let x = s.input(Tensor::randn(vec![4, 2, 16], &mut rng));
        let y = b.forward(&mut s, x).unwrap();
        let target = s.input(Tensor::randn(vec![4, 3, 16], &mut rng));
        let loss = s.tape.mse_loss(y, target).unwrap();
        let g = s.backward(loss).unwrap();
        let gb = g.grads[b.beta.0].as_ref().unwrap();
        assert!(gb.data().iter().any(|v| v.abs() > 1e-8), "{:?}", gb.data());
    }

    proptest! {
        #[test]
        fn shift_invariance(logits in proptest::collection::vec(-5.0f64..5.0, 1..6), c in -10.0f64..10.0) {
            let a = softmax(&logits);
            let shifted: Vec<f64> = logits.iter().map(|v| v + c).collect();
            let b = softmax(&shifted);
            prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn length_preserved(len in 1usize..40, k in 0usize..4, d in 1usize..5) {
            let (store, b) = block(&[(2 * k + 1, d), (3, 1)], 1, 2);
            let mut s = Session::inference(&store, false);
            let x = s.input(Tensor::zeros(vec![1, 1, len]));
            let y = b.forward(&mut s, x).unwrap();
            prop_assert_eq!(s.tape.shape(y), &[1, 2, len]);
        }
    }
}
