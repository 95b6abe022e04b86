//! Seeded synthetic datasets standing in for real recordings.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToyKind {
    /// Random-phase sine mixtures.
    Sines,
    /// AR(2) noise.
    Arma,
    /// Damped sway followed by a diverging tail.
    Switching,
}

impl std::str::FromStr for ToyKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sines" => Ok(ToyKind::Sines),
            "arma" => Ok(ToyKind::Arma),
            "switching" => Ok(ToyKind::Switching),
            _ => Err(Error::config(format!(
                "unknown toy kind `{s}` (expected sines, arma or switching)"
            ))),
        }
    }
}

pub const AR_PHI: (f64, f64) = (0.5, -0.3);
/// Amplitude range of each sine component.
pub const SINE_AMP: (f64, f64) = (0.2, 1.0);
pub const SINE_COMPONENTS: usize = 2;

/// Lag-1 autocorrelation of the AR(2) process above.
pub fn ar_lag1() -> f64 {
    AR_PHI.0 / (1.0 - AR_PHI.1)
}

/// `n` windows laid out `[n, channels, length]`.
pub fn generate(kind: ToyKind, n: usize, length: usize, channels: usize, seed: u64) -> Result<Vec<f32>> {
    if n == 0 || length == 0 || channels == 0 {
        return Err(Error::config("toy dataset dimensions must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n * channels * length);
    for _ in 0..n {
        match kind {
            ToyKind::Sines => sines(&mut rng, length, channels, &mut out),
            ToyKind::Arma => {
                for _ in 0..channels {
                    arma(&mut rng, length, &mut out);
                }
            }
            ToyKind::Switching => switching(&mut rng, length, channels, &mut out),
        }
    }
    Ok(out)
}

fn sines(rng: &mut ChaCha8Rng, length: usize, channels: usize, out: &mut Vec<f32>) {
    let tau = std::f64::consts::TAU;
    // frequencies shared across channels so channels are correlated
    let freqs: Vec<f64> = (0..SINE_COMPONENTS).map(|_| rng.random_range(1.0..4.0)).collect();
    for _ in 0..channels {
        let comps: Vec<(f64, f64)> = freqs
            .iter()
            .map(|_| (rng.random_range(SINE_AMP.0..SINE_AMP.1), rng.random_range(0.0..tau)))
            .collect();
        for i in 0..length {
            let x = i as f64 / length as f64;
            let v: f64 = freqs
                .iter()
                .zip(&comps)
                .map(|(f, (a, p))| a * (tau * f * x + p).sin())
                .sum();
            out.push(v as f32);
        }
    }
}

fn arma(rng: &mut ChaCha8Rng, length: usize, out: &mut Vec<f32>) {
    let (p1, p2) = AR_PHI;
    let (mut x1, mut x2) = (0.0, 0.0);
    for i in 0..length + 64 {
        let e: f64 = StandardNormal.sample(rng);
        let x = p1 * x1 + p2 * x2 + e;
        x2 = x1;
        x1 = x;
        if i >= 64 {
            out.push(x as f32);
        }
    }
}

fn switching(rng: &mut ChaCha8Rng, length: usize, channels: usize, out: &mut Vec<f32>) {
    let l = length as f64;
    let switch = rng.random_range(0.5..0.8) * l;
    let dir = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    for _ in 0..channels {
        let gain = rng.random_range(0.5..1.5);
        let omega = rng.random_range(4.0..8.0) * std::f64::consts::TAU / l;
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let decay = rng.random_range(0.5..2.0) / l;
        for i in 0..length {
            let t = i as f64;
            let noise: f64 = StandardNormal.sample(rng);
            let mut v = 0.3 * gain * (-decay * t).exp() * (omega * t + phase).sin() + 0.02 * noise;
            if t >= switch {
                let u = (t - switch) / (l - switch).max(1.0);
                v += dir * gain * 2.0 * u * u;
            }
            out.push(v as f32);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded() {
        for kind in [ToyKind::Sines, ToyKind::Arma, ToyKind::Switching] {
            assert_eq!(generate(kind, 4, 32, 2, 1).unwrap(), generate(kind, 4, 32, 2, 1).unwrap());
            assert_ne!(generate(kind, 4, 32, 2, 1).unwrap(), generate(kind, 4, 32, 2, 2).unwrap());
        }
    }

    #[test]
    fn sines_bounded() {
        let bound = SINE_COMPONENTS as f32 * SINE_AMP.1 as f32;
        assert!(generate(ToyKind::Sines, 50, 64, 3, 0)
            .unwrap()
            .iter()
            .all(|v| v.abs() <= bound));
    }

    #[test]
    fn arma_lag1_autocorrelation() {
        let (n, l) = (100, 1024);
        let x = generate(ToyKind::Arma, n, l, 1, 3).unwrap();
        let (mut num, mut den) = (0.0f64, 0.0f64);
        let mean = x.iter().map(|&v| v as f64).sum::<f64>() / x.len() as f64;
        for w in x.chunks(l) {
            for i in 0..l {
                let a = w[i] as f64 - mean;
                den += a * a;
                if i + 1 < l {
                    num += a * (w[i + 1] as f64 - mean);
                }
            }
        }
        let r1 = num / den;
        assert!((r1 - ar_lag1()).abs() < 0.05, "{r1} vs {}", ar_lag1());
        assert!((ar_lag1() - 0.3846).abs() < 1e-4);
    }

    #[test]
    fn switching_diverges_at_the_end() {
        let x = generate(ToyKind::Switching, 20, 100, 1, 5).unwrap();
        for w in x.chunks(100) {
            let head = w[..40].iter().fold(0.0f32, |m, v| m.max(v.abs()));
            assert!(w[99].abs() > 2.0 * head, "{} {}", w[99], head);
        }
    }
}
