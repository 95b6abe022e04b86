//! Jensen-Shannon divergence between pooled value histograms.

use crate::error::{Error, Result};

pub const SMOOTHING: f64 = 1e-12;

/// Histograms of `a` and `b` over their joint range, smoothed and
/// normalized to probability vectors.
pub fn histograms(a: &[f64], b: &[f64], bins: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if bins < 2 {
        return Err(Error::config(format!("jsd needs at least 2 bins, got {bins}")));
    }
    if a.is_empty() || b.is_empty() {
        return Err(Error::data("jsd", "empty batch"));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::data("jsd", "non-finite value in input"));
    }
    let (lo, hi) = a
        .iter()
        .chain(b)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let width = (hi - lo) / bins as f64;
    let hist = |xs: &[f64]| {
        let mut h = vec![SMOOTHING; bins];
        for &v in xs {
            let k = if width > 0.0 {
                (((v - lo) / width) as usize).min(bins - 1)
            } else {
                0
            };
            h[k] += 1.0;
        }
        let total: f64 = h.iter().sum();
        h.iter_mut().for_each(|v| *v /= total);
        h
    };
    Ok((hist(a), hist(b)))
}

/// `0.5 KL(P||M) + 0.5 KL(Q||M)` in nats. Each bin's term is symmetric in
/// `p` and `q`, so the result is exactly symmetric.
pub fn divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&p, &q)| {
            let m = 0.5 * (p + q);
            0.5 * (p * (p / m).ln() + q * (q / m).ln())
        })
        .sum::<f64>()
        .max(0.0)
}

/// JSD of the pooled values of two batches.
pub fn jsd(a: &[f64], b: &[f64], bins: usize) -> Result<f64> {
    let (p, q) = histograms(a, b, bins)?;
    Ok(divergence(&p, &q))
}

/// Mean over channels of per-channel JSD; batches are `[n, c, l]`.
pub fn jsd_per_channel(a: &[f64], b: &[f64], c: usize, l: usize, bins: usize) -> Result<f64> {
    let pick = |xs: &[f64], ch: usize| -> Vec<f64> {
        xs.chunks(c * l).flat_map(|w| w[ch * l..(ch + 1) * l].to_vec()).collect()
    };
    let mut total = 0.0;
    for ch in 0..c {
        total += jsd(&pick(a, ch), &pick(b, ch), bins)?;
    }
    Ok(total / c as f64)
}
