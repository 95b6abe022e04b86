//! Noise schedule and the closed-form forward process.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndgrad::{Real, Tensor};

/// Variance used for the stochastic term of a reverse step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaKind {
    /// `sigma_t^2 = beta_t`
    #[default]
    Beta,
    /// `sigma_t^2 = beta_t (1 - abar_{t-1}) / (1 - abar_t)`
    Posterior,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    #[serde(default)]
    pub sigma: SigmaKind,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            sigma: SigmaKind::Beta,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        let mut s = NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)?;
        s.sigma = self.sigma;
        Ok(s)
    }
}

/// Per-step coefficients for `T` diffusion steps, all in `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    pub sigma: SigmaKind,
}

/// `x_{t-1} = c_xt * x_t - c_eps * eps_hat + sigma * z`
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReverseCoeffs {
    pub c_xt: f64,
    pub c_eps: f64,
    pub sigma: f64,
}

impl NoiseSchedule {
    /// Betas linearly spaced from `beta_start` to `beta_end` inclusive.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::config("schedule needs at least one step"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::config(format!(
                "schedule needs 0 < beta_start <= beta_end < 1, got {beta_start} and {beta_end}"
            )));
        }
        let beta: Vec<f64> = (0..steps)
            .map(|t| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * t as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(beta)
    }

    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() || beta.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::config("every beta must lie in (0, 1)"));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar = alpha
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(NoiseSchedule {
            beta,
            alpha,
            alpha_bar,
            sigma: SigmaKind::Beta,
        })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check(&self, t: usize) -> Result<()> {
        if t >= self.steps() {
            Err(Error::Index {
                what: "diffusion step t",
                index: t,
                bound: self.steps(),
            })
        } else {
            Ok(())
        }
    }

    /// `sqrt(abar_t) x0 + sqrt(1 - abar_t) noise`, with one `t` per batch row.
    pub fn q_sample<T: Real>(&self, x0: &Tensor<T>, t: &[usize], noise: &Tensor<T>) -> Result<Tensor<T>> {
        if x0.shape() != noise.shape() {
            return Err(Error::shape(
                "q_sample",
                format!("x0 {:?} vs noise {:?}", x0.shape(), noise.shape()),
            ));
        }
        let b = x0.shape().first().copied().unwrap_or(0);
        if t.len() != b {
            return Err(Error::shape(
                "q_sample",
                format!("{} step indices for batch {b}", t.len()),
            ));
        }
        let inner = x0.numel().checked_div(b).unwrap_or(0);
        let mut out = Vec::with_capacity(x0.numel());
        for (i, &ti) in t.iter().enumerate() {
            self.check(ti)?;
            let a = self.alpha_bar[ti].sqrt();
            let s = (1.0 - self.alpha_bar[ti]).sqrt();
            let r = i * inner..(i + 1) * inner;
            out.extend(
                x0.data()[r.clone()]
                    .iter()
                    .zip(&noise.data()[r])
                    .map(|(&x, &e)| T::of(a * x.as_f64() + s * e.as_f64())),
            );
        }
        Tensor::new(x0.shape().to_vec(), out)
    }

    /// One forward transition `x_{t+1} = sqrt(alpha) x_t + sqrt(beta) noise`
    /// into step `t` (0-based: `t = 0` maps clean data to the first level).
    pub fn q_step(&self, x: f64, t: usize, noise: f64) -> Result<f64> {
        self.check(t)?;
        Ok(self.alpha[t].sqrt() * x + self.beta[t].sqrt() * noise)
    }

    pub fn reverse_coeffs(&self, t: usize) -> Result<ReverseCoeffs> {
        self.check(t)?;
        let (a, b, ab) = (self.alpha[t], self.beta[t], self.alpha_bar[t]);
        let sigma = match self.sigma {
            SigmaKind::Beta => b.sqrt(),
            SigmaKind::Posterior => {
                let prev = if t == 0 { 1.0 } else { self.alpha_bar[t - 1] };
                (b * (1.0 - prev) / (1.0 - ab)).sqrt()
            }
        };
        Ok(ReverseCoeffs {
            c_xt: 1.0 / a.sqrt(),
            c_eps: b / (a.sqrt() * (1.0 - ab).sqrt()),
            sigma,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_step_half() {
        let s = NoiseSchedule::linear(1, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bar(), &[0.5]);
    }

    #[test]
    fn default_endpoints() {
        let s = ScheduleConfig::default().build().unwrap();
        assert!((s.alpha_bar()[0] - 0.9999).abs() < 1e-15);
        let prod: f64 = (0..1000)
            .map(|t| 1.0 - (1e-4 + (0.02 - 1e-4) * t as f64 / 999.0))
            .product();
        assert!((s.alpha_bar()[999] - prod).abs() < 1e-15);
        assert!(s.alpha_bar()[999] < 0.05);
    }

    #[test]
    fn invalid_configs() {
        assert!(NoiseSchedule::linear(0, 0.1, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.3, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn q_sample_hand_value() {
        let s = NoiseSchedule::from_betas(vec![0.75]).unwrap();
        let x0 = Tensor::<f64>::full(vec![1, 1, 1], 2.0);
        let e = Tensor::<f64>::full(vec![1, 1, 1], 1.0);
        let y = s.q_sample(&x0, &[0], &e).unwrap();
        assert!((y.item() - (1.0 + 0.75f64.sqrt())).abs() < 1e-12);
        assert!((y.item() - 1.8660).abs() < 1e-4);
    }

    #[test]
    fn q_sample_zero_noise_scales_exactly() {
        let s = ScheduleConfig::default().build().unwrap();
        let x0 = Tensor::<f64>::from_fn(vec![2, 1, 3], |i| i as f64 - 2.0);
        let z = Tensor::<f64>::zeros(vec![2, 1, 3]);
        let y = s.q_sample(&x0, &[10, 500], &z).unwrap();
        for i in 0..3 {
            assert_eq!(y.data()[i], s.alpha_bar()[10].sqrt() * x0.data()[i]);
            assert_eq!(y.data()[3 + i], s.alpha_bar()[500].sqrt() * x0.data()[3 + i]);
        }
    }

    #[test]
    fn q_sample_out_of_range_names_t_and_steps() {
        let s = NoiseSchedule::linear(5, 0.1, 0.2).unwrap();
        let x = Tensor::<f32>::zeros(vec![1, 1, 1]);
        let msg = s.q_sample(&x, &[5], &x).unwrap_err().to_string();
        assert!(msg.contains('5') && msg.contains("step"), "{msg}");
    }

    #[test]
    fn reverse_coefficients() {
        let s = NoiseSchedule::from_betas(vec![1e-4, 0.02]).unwrap();
        let c = s.reverse_coeffs(1).unwrap();
        assert!((c.c_xt - 1.01015).abs() < 1e-5);
        assert!((s.reverse_coeffs(0).unwrap().sigma - 0.01).abs() < 1e-15);
        let expect = 0.02 / (0.98f64.sqrt() * (1.0 - s.alpha_bar()[1]).sqrt());
        assert!((c.c_eps - expect).abs() < 1e-15);
        assert!(s.reverse_coeffs(2).is_err());
    }

    #[test]
    fn posterior_sigma_is_zero_at_first_step() {
        let mut s = NoiseSchedule::linear(10, 1e-3, 0.1).unwrap();
        s.sigma = SigmaKind::Posterior;
        assert_eq!(s.reverse_coeffs(0).unwrap().sigma, 0.0);
        assert!(s.reverse_coeffs(5).unwrap().sigma < s.beta()[5].sqrt());
    }

    proptest! {
        #[test]
        fn alpha_bar_strictly_decreasing(steps in 1usize..400, a in 1e-5f64..0.5, span in 0.0f64..0.49) {
            let s = NoiseSchedule::linear(steps, a, a + span).unwrap();
            prop_assert!((s.alpha_bar()[0] - (1.0 - a)).abs() < 1e-15);
            for w in s.alpha_bar().windows(2) {
                prop_assert!(w[1] < w[0]);
            }
            for w in s.beta().windows(2) {
                prop_assert!(w[1] >= w[0]);
            }
        }
    }
}
