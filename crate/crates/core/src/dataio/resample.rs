//! Anti-aliased downsampling and fixed-length cropping.

use crate::error::{Error, Result};

/// Zero crossings of the sinc kernel kept on each side.
const HALF_ZEROS: f64 = 16.0;

fn blackman(u: f64) -> f64 {
    // u in [-1, 1]
    let a = std::f64::consts::PI * (u + 1.0);
    0.42 - 0.5 * a.cos() + 0.08 * (2.0 * a).cos()
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Low-pass at `0.5 * to_hz` with a Blackman-windowed sinc, then evaluate
/// at the output sample instants. Output length is
/// `floor(len * to_hz / from_hz)`.
///
/// Kernel weights are renormalized per output sample, so a constant input
/// stays constant up to rounding, including near the edges.
pub fn downsample(series: &[f64], from_hz: f64, to_hz: f64) -> Result<Vec<f64>> {
    if !(to_hz > 0.0 && from_hz.is_finite() && to_hz.is_finite()) {
        return Err(Error::config(format!("invalid rates {from_hz} -> {to_hz} Hz")));
    }
    if to_hz >= from_hz {
        return Err(Error::config(format!(
            "downsample needs from_hz > to_hz, got {from_hz} -> {to_hz} (upsampling is not supported)"
        )));
    }
    let n_out = (series.len() as f64 * to_hz / from_hz).floor() as usize;
    // cutoff as a fraction of the input rate
    let fc = 0.5 * to_hz / from_hz;
    let spacing = 1.0 / (2.0 * fc);
    let half = HALF_ZEROS * spacing;
    let step = from_hz / to_hz;
    let mut out = Vec::with_capacity(n_out);
    for j in 0..n_out {
        let centre = j as f64 * step;
        let lo = (centre - half).ceil().max(0.0) as usize;
        let hi = ((centre + half).floor() as usize).min(series.len() - 1);
        let (mut acc, mut wsum) = (0.0, 0.0);
        for (k, &x) in series.iter().enumerate().take(hi + 1).skip(lo) {
            let d = k as f64 - centre;
            let w = sinc(2.0 * fc * d) * blackman(d / half);
            acc += w * x;
            wsum += w;
        }
        out.push(acc / wsum);
    }
    Ok(out)
}

/// Centered slice of length `n`; with an odd surplus the extra sample is
/// dropped from the right.
pub fn take_middle<T: Clone>(series: &[T], n: usize) -> Result<Vec<T>> {
    if series.len() < n {
        return Err(Error::data(
            "take_middle",
            format!("series has {} points, need {n}", series.len()),
        ));
    }
    let start = (series.len() - n) / 2;
    Ok(series[start..start + n].to_vec())
}

/// Last `n` points.
pub fn take_tail<T: Clone>(series: &[T], n: usize) -> Result<Vec<T>> {
    if series.len() < n {
        return Err(Error::data(
            "take_tail",
            format!("series has {} points, need {n}", series.len()),
        ));
    }
    Ok(series[series.len() - n..].to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn length_contract() {
        let x = vec![0.0; 2304];
        assert_eq!(downsample(&x, 256.0, 100.0).unwrap().len(), 900);
        assert!(downsample(&x, 100.0, 256.0).is_err());
        assert!(downsample(&x, 100.0, 100.0).is_err());
    }

    #[test]
    fn dc_preserved() {
        let x = vec![3.25; 1000];
        for v in downsample(&x, 256.0, 100.0).unwrap() {
            assert!((v - 3.25).abs() < 1e-12);
        }
    }

    #[test]
    fn passband_sine_amplitude_kept() {
        let f = 10.0;
        let x: Vec<f64> = (0..4096)
            .map(|i| (2.0 * std::f64::consts::PI * f * i as f64 / 256.0).sin())
            .collect();
        let y = downsample(&x, 256.0, 100.0).unwrap();
        // least-squares amplitude at the known frequency, edges dropped
        let w = 2.0 * std::f64::consts::PI * f / 100.0;
        let (mut s, mut c, mut n) = (0.0, 0.0, 0.0);
        for (j, v) in y.iter().enumerate().take(y.len() - 100).skip(100) {
            s += v * (w * j as f64).sin();
            c += v * (w * j as f64).cos();
            n += 1.0;
        }
        let amp = 2.0 * (s * s + c * c).sqrt() / n;
        assert!((amp - 1.0).abs() < 0.02, "{amp}");
    }

    #[test]
    fn stopband_sine_suppressed() {
        let f = 90.0;
        let x: Vec<f64> = (0..4096)
            .map(|i| (2.0 * std::f64::consts::PI * f * i as f64 / 256.0).sin())
            .collect();
        let y = downsample(&x, 256.0, 100.0).unwrap();
        let peak = y[100..y.len() - 100].iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(peak < 0.01, "{peak}");
    }

    #[test]
    fn crops() {
        let s: Vec<i32> = (1..=10).collect();
        assert_eq!(take_middle(&s, 4).unwrap(), vec![4, 5, 6, 7]);
        assert_eq!(take_middle(&s, 3).unwrap(), vec![4, 5, 6]);
        assert_eq!(take_middle(&s, 10).unwrap(), s);
        assert_eq!(take_tail(&s, 3).unwrap(), vec![8, 9, 10]);
        let e = take_tail(&s, 11).unwrap_err().to_string();
        assert!(e.contains("10") && e.contains("11"), "{e}");
    }
}
