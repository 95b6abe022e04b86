//! Gaussian kernel density estimates and their CSV/SVG artifacts.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const GRID_POINTS: usize = 512;

/// Silverman's rule of thumb: `0.9 min(sd, IQR / 1.34) n^(-1/5)`.
pub fn silverman(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let pos = p * (s.len() - 1) as f64;
        let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
        s[lo] + (s[hi] - s[lo]) * (pos - lo as f64)
    };
    let iqr = q(0.75) - q(0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    let h = 0.9 * spread * n.powf(-0.2);
    if h > 0.0 && h.is_finite() {
        h
    } else {
        1e-3 * mean.abs().max(1.0)
    }
}

/// Density of `values` on an evenly spaced `grid`, via linear binning onto
/// the grid followed by a discrete Gaussian convolution.
pub fn density_on_grid(values: &[f64], grid: &[f64], h: f64) -> Vec<f64> {
    let g = grid.len();
    let (lo, step) = (grid[0], grid[1] - grid[0]);
    let mut w = vec![0.0; g];
    for &v in values {
        let pos = ((v - lo) / step).clamp(0.0, (g - 1) as f64);
        let k = (pos.floor() as usize).min(g - 2);
        let frac = pos - k as f64;
        w[k] += 1.0 - frac;
        w[k + 1] += frac;
    }
    let norm = 1.0 / (values.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    let reach = ((6.0 * h / step).ceil() as usize).min(g);
    let kernel: Vec<f64> = (0..=reach)
        .map(|d| (-0.5 * (d as f64 * step / h).powi(2)).exp())
        .collect();
    (0..g)
        .map(|i| {
            let a = i.saturating_sub(reach);
            let b = (i + reach).min(g - 1);
            (a..=b).map(|j| w[j] * kernel[i.abs_diff(j)]).sum::<f64>() * norm
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct KdePair {
    pub grid: Vec<f64>,
    pub real: Vec<f64>,
    pub synth: Vec<f64>,
}

/// Densities of both sets on a shared grid covering both ranges.
pub fn kde_pair(real: &[f64], synth: &[f64]) -> Result<KdePair> {
    if real.is_empty() || synth.is_empty() {
        return Err(Error::data("kde", "empty input"));
    }
    let (hr, hs) = (silverman(real), silverman(synth));
    let (lo, hi) = real
        .iter()
        .chain(synth)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let pad = 3.0 * hr.max(hs);
    let (lo, hi) = (lo - pad, hi + pad);
    let grid: Vec<f64> = (0..GRID_POINTS)
        .map(|i| lo + (hi - lo) * i as f64 / (GRID_POINTS - 1) as f64)
        .collect();
    Ok(KdePair {
        real: density_on_grid(real, &grid, hr),
        synth: density_on_grid(synth, &grid, hs),
        grid,
    })
}

fn write_csv(path: &Path, grid: &[f64], d: &[f64]) -> Result<()> {
    let mut s = String::from("x,density\n");
    for (x, y) in grid.iter().zip(d) {
        let _ = writeln!(s, "{x:.9e},{y:.9e}");
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// SVG overlay of both densities with the overlap shaded.
pub fn render_svg(k: &KdePair, title: &str) -> String {
    let (w, h, m) = (640.0, 400.0, 40.0);
    let ymax = k.real.iter().chain(&k.synth).fold(0.0f64, |a, &b| a.max(b)).max(1e-12);
    let (x0, x1) = (k.grid[0], *k.grid.last().unwrap());
    let px = |x: f64| m + (x - x0) / (x1 - x0) * (w - 2.0 * m);
    let py = |y: f64| h - m - y / ymax * (h - 2.0 * m);
    let path = |d: &[f64]| {
        let mut s = String::new();
        for (x, y) in k.grid.iter().zip(d) {
            let _ = write!(s, "{:.2},{:.2} ", px(*x), py(*y));
        }
        s
    };
    let area = |d: &[f64]| {
        format!(
            "{:.2},{:.2} {}{:.2},{:.2}",
            px(x0),
            py(0.0),
            path(d),
            px(x1),
            py(0.0)
        )
    };
    let overlap: Vec<f64> = k.real.iter().zip(&k.synth).map(|(a, b)| a.min(*b)).collect();
    let title = title.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;");
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"  <rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"  <text x="{}" y="24" text-anchor="middle" font-family="sans-serif" font-size="14">{title}</text>"#, w / 2.0);
    let _ = writeln!(s, r##"  <polygon points="{}" fill="#7f7f7f" fill-opacity="0.35" stroke="none"/>"##, area(&overlap));
    let _ = writeln!(s, r##"  <polyline points="{}" fill="none" stroke="#1f77b4" stroke-width="2"/>"##, path(&k.real));
    let _ = writeln!(s, r##"  <polyline points="{}" fill="none" stroke="#d62728" stroke-width="2" stroke-dasharray="6 3"/>"##, path(&k.synth));
    let _ = writeln!(s, r##"  <line x1="{m}" y1="{0}" x2="{1}" y2="{0}" stroke="black"/>"##, h - m, w - m);
    let _ = writeln!(s, r#"  <text x="{m}" y="{}" font-family="sans-serif" font-size="11">{x0:.3}</text>"#, h - m + 16.0);
    let _ = writeln!(s, r#"  <text x="{}" y="{}" text-anchor="end" font-family="sans-serif" font-size="11">{x1:.3}</text>"#, w - m, h - m + 16.0);
    let _ = writeln!(s, r##"  <text x="{}" y="44" font-family="sans-serif" font-size="12" fill="#1f77b4">real</text>"##, w - 120.0);
    let _ = writeln!(s, r##"  <text x="{}" y="60" font-family="sans-serif" font-size="12" fill="#d62728">synthetic</text>"##, w - 120.0);
    let _ = writeln!(s, r##"  <text x="{}" y="76" font-family="sans-serif" font-size="12" fill="#7f7f7f">overlap</text>"##, w - 120.0);
    s.push_str("</svg>\n");
    s
}

#[derive(Clone, Debug)]
pub struct KdeArtifacts {
    pub real_csv: PathBuf,
    pub synth_csv: PathBuf,
    pub svg: PathBuf,
}

/// Write `{stem}_real.csv`, `{stem}_synth.csv` and `{stem}.svg` into `dir`.
pub fn emit_kde(real: &[f64], synth: &[f64], dir: &Path, stem: &str) -> Result<KdeArtifacts> {
    let k = kde_pair(real, synth)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let out = KdeArtifacts {
        real_csv: dir.join(format!("{stem}_real.csv")),
        synth_csv: dir.join(format!("{stem}_synth.csv")),
        svg: dir.join(format!("{stem}.svg")),
    };
    write_csv(&out.real_csv, &k.grid, &k.real)?;
    write_csv(&out.synth_csv, &k.grid, &k.synth)?;
    std::fs::write(&out.svg, render_svg(&k, stem)).map_err(|e| Error::io(&out.svg, e))?;
    Ok(out)
}
