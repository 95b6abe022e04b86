//! Per-channel normalization with an exact inverse.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScalerKind {
    /// Map `[min, max]` to `[-1, 1]`.
    #[default]
    MinMax,
    /// Subtract mean, divide by standard deviation.
    ZScore,
}

/// Per-channel statistics: `(min, max)` or `(mean, std)` depending on kind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub kind: ScalerKind,
    pub stats: Vec<(f64, f64)>,
}

/// Values outside `[-1 - BOUND_SLACK, 1 + BOUND_SLACK]` after min-max scaling
/// are flagged.
pub const BOUND_SLACK: f64 = 1e-6;

impl Scaler {
    /// Fit on `windows` laid out `[n, c, l]`.
    pub fn fit(kind: ScalerKind, windows: &[f32], c: usize, l: usize) -> Result<Self> {
        if c == 0 || l == 0 || windows.is_empty() || !windows.len().is_multiple_of(c * l) {
            return Err(Error::shape(
                "scaler fit",
                format!("{} values do not form windows of [{c}, {l}]", windows.len()),
            ));
        }
        let mut stats = Vec::with_capacity(c);
        for ch in 0..c {
            let vals = windows
                .chunks(c * l)
                .flat_map(|w| w[ch * l..(ch + 1) * l].iter().map(|&v| v as f64));
            let s = match kind {
                ScalerKind::MinMax => vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                    (lo.min(v), hi.max(v))
                }),
                ScalerKind::ZScore => {
                    let (mut n, mut sum, mut sq) = (0.0, 0.0, 0.0);
                    for v in vals {
                        n += 1.0;
                        sum += v;
                        sq += v * v;
                    }
                    let mean = sum / n;
                    (mean, (sq / n - mean * mean).max(0.0).sqrt())
                }
            };
            stats.push(s);
        }
        Ok(Scaler { kind, stats })
    }

    pub fn channels(&self) -> usize {
        self.stats.len()
    }

    fn check(&self, len: usize, c: usize, l: usize) -> Result<()> {
        if c != self.stats.len() || l == 0 || !len.is_multiple_of(c * l) {
            return Err(Error::shape(
                "scaler",
                format!("scaler has {} channels, data is [_, {c}, {l}]", self.stats.len()),
            ));
        }
        Ok(())
    }

    /// Scale in place. Returns how many values fall outside the nominal range
    /// (min-max only; zero for z-score).
    pub fn normalize(&self, data: &mut [f32], c: usize, l: usize) -> Result<usize> {
        self.check(data.len(), c, l)?;
        let mut outside = 0;
        for w in data.chunks_mut(c * l) {
            for (ch, &(a, b)) in self.stats.iter().enumerate() {
                for v in &mut w[ch * l..(ch + 1) * l] {
                    let x = *v as f64;
                    let y = match self.kind {
                        ScalerKind::MinMax if b > a => 2.0 * (x - a) / (b - a) - 1.0,
                        ScalerKind::ZScore if b > 0.0 => (x - a) / b,
                        _ => 0.0,
                    };
                    if self.kind == ScalerKind::MinMax && y.abs() > 1.0 + BOUND_SLACK {
                        outside += 1;
                    }
                    *v = y as f32;
                }
            }
        }
        Ok(outside)
    }

    pub fn denormalize(&self, data: &mut [f32], c: usize, l: usize) -> Result<()> {
        self.check(data.len(), c, l)?;
        for w in data.chunks_mut(c * l) {
            for (ch, &(a, b)) in self.stats.iter().enumerate() {
                for v in &mut w[ch * l..(ch + 1) * l] {
                    let y = *v as f64;
                    *v = match self.kind {
                        ScalerKind::MinMax if b > a => (y + 1.0) * 0.5 * (b - a) + a,
                        ScalerKind::ZScore if b > 0.0 => y * b + a,
                        _ => a,
                    } as f32;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn midpoint_maps_to_zero() {
        let s = Scaler {
            kind: ScalerKind::MinMax,
            stats: vec![(0.0, 10.0)],
        };
        let mut d = [5.0f32, 0.0, 10.0];
        assert_eq!(s.normalize(&mut d, 1, 3).unwrap(), 0);
        assert_eq!(d, [0.0, -1.0, 1.0]);
    }

    #[test]
    fn constant_channel_round_trips_exactly() {
        for kind in [ScalerKind::MinMax, ScalerKind::ZScore] {
            let orig = [2.5f32; 8];
            let s = Scaler::fit(kind, &orig, 2, 4).unwrap();
            let mut d = orig;
            s.normalize(&mut d, 2, 4).unwrap();
            assert!(d.iter().all(|&v| v == 0.0));
            s.denormalize(&mut d, 2, 4).unwrap();
            assert_eq!(d, orig);
        }
    }

    #[test]
    fn out_of_range_flagged() {
        let s = Scaler::fit(ScalerKind::MinMax, &[0.0, 1.0], 1, 2).unwrap();
        let mut d = [2.0f32, 0.5];
        assert_eq!(s.normalize(&mut d, 1, 2).unwrap(), 1);
    }

    proptest! {
        #[test]
        fn round_trip(vals in prop::collection::vec(-10f32..10.0, 24), z in any::<bool>()) {
            let kind = if z { ScalerKind::ZScore } else { ScalerKind::MinMax };
            let s = Scaler::fit(kind, &vals, 3, 4).unwrap();
            let mut d = vals.clone();
            let outside = s.normalize(&mut d, 3, 4).unwrap();
            prop_assert_eq!(outside, 0);
            if kind == ScalerKind::MinMax {
                prop_assert!(d.iter().all(|v| v.abs() <= 1.0 + 1e-6));
            }
            s.denormalize(&mut d, 3, 4).unwrap();
            for (a, b) in d.iter().zip(&vals) {
                prop_assert!((a - b).abs() < 1e-5, "{} vs {}", a, b);
            }
        }
    }
}
