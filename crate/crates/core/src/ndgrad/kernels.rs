//! Raw conv1d kernels shared by the tape and by benches.

use super::real::{gemm, Real};

/// Resolved geometry of one conv1d call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub len: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub pad_left: usize,
    pub pad_right: usize,
    pub out_len: usize,
}

impl ConvGeom {
    /// `None` when the padded input is shorter than the dilated kernel.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        batch: usize,
        cin: usize,
        len: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
        pad_left: usize,
        pad_right: usize,
    ) -> Option<Self> {
        let span = dilation * (kernel - 1) + 1;
        let padded = len + pad_left + pad_right;
        if padded < span {
            return None;
        }
        Some(ConvGeom {
            batch,
            cin,
            len,
            cout,
            kernel,
            stride,
            dilation,
            pad_left,
            pad_right,
            out_len: (padded - span) / stride + 1,
        })
    }

    /// Samples per GEMM so the column buffer stays near `CHUNK_ELEMS`.
    fn chunk(&self) -> usize {
        (CHUNK_ELEMS / (self.cin * self.kernel * self.out_len).max(1)).clamp(1, self.batch.max(1))
    }

    /// Output positions `j` whose tap `kk` lands inside the input.
    fn valid_range(&self, kk: usize) -> (usize, usize) {
        let off = (kk * self.dilation) as isize - self.pad_left as isize;
        let s = self.stride as isize;
        // smallest j with j*s + off >= 0
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        // largest j with j*s + off <= len-1
        let hi_num = self.len as isize - 1 - off;
        let hi = if hi_num < 0 { -1 } else { hi_num / s };
        let lo = lo as usize;
        let hi_excl = ((hi + 1).max(0) as usize).min(self.out_len);
        (lo.min(hi_excl), hi_excl)
    }
}

/// Column buffer budget in elements.
const CHUNK_ELEMS: usize = 1 << 16;

/// Unfold one sample into columns `[off, off + out_len)` of a
/// `[cin * kernel, ld]` buffer.
fn im2col<T: Real>(x: &[T], g: &ConvGeom, ranges: &[(usize, usize)], cols: &mut [T], ld: usize, off: usize) {
    let lout = g.out_len;
    for ci in 0..g.cin {
        let xrow = &x[ci * g.len..(ci + 1) * g.len];
        for (kk, &(lo, hi)) in ranges.iter().enumerate() {
            let r = (ci * g.kernel + kk) * ld + off;
            let row = &mut cols[r..r + lout];
            row[..lo].fill(T::zero());
            row[hi..].fill(T::zero());
            if hi == lo {
                continue;
            }
            let tap = kk * g.dilation;
            if g.stride == 1 {
                let start = lo + tap - g.pad_left;
                row[lo..hi].copy_from_slice(&xrow[start..start + (hi - lo)]);
            } else {
                for (j, v) in row.iter_mut().enumerate().take(hi).skip(lo) {
                    *v = xrow[j * g.stride + tap - g.pad_left];
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], g: &ConvGeom, ranges: &[(usize, usize)], ld: usize, off: usize, dx: &mut [T]) {
    for ci in 0..g.cin {
        let xrow = &mut dx[ci * g.len..(ci + 1) * g.len];
        for (kk, &(lo, hi)) in ranges.iter().enumerate() {
            if hi == lo {
                continue;
            }
            let r = (ci * g.kernel + kk) * ld + off;
            let row = &cols[r + lo..r + hi];
            let tap = kk * g.dilation;
            if g.stride == 1 {
                let start = lo + tap - g.pad_left;
                for (d, &v) in xrow[start..start + (hi - lo)].iter_mut().zip(row) {
                    *d += v;
                }
            } else {
                for (j, &v) in (lo..hi).zip(row) {
                    xrow[j * g.stride + tap - g.pad_left] += v;
                }
            }
        }
    }
}

/// `y = w * im2col(x) + bias`, one GEMM per chunk of samples.
pub fn conv1d_forward<T: Real>(x: &[T], w: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let (ck, lout, sx) = (g.cin * g.kernel, g.out_len, g.cin * g.len);
    let mut out = vec![T::zero(); g.batch * g.cout * lout];
    let chunk = g.chunk();
    let ranges: Vec<(usize, usize)> = (0..g.kernel).map(|kk| g.valid_range(kk)).collect();
    let mut cols = vec![T::zero(); ck * chunk * lout];
    let mut tmp = vec![T::zero(); g.cout * chunk * lout];
    for b0 in (0..g.batch).step_by(chunk) {
        let nb = chunk.min(g.batch - b0);
        let ld = nb * lout;
        for i in 0..nb {
            im2col(&x[(b0 + i) * sx..(b0 + i + 1) * sx], g, &ranges, &mut cols, ld, i * lout);
        }
        gemm(g.cout, ck, ld, w, false, &cols[..ck * ld], false, &mut tmp[..g.cout * ld], false);
        for i in 0..nb {
            for co in 0..g.cout {
                let src = &tmp[co * ld + i * lout..co * ld + (i + 1) * lout];
                let o = ((b0 + i) * g.cout + co) * lout;
                let dst = &mut out[o..o + lout];
                let bv = bias.map_or(T::zero(), |b| b[co]);
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s + bv;
                }
            }
        }
    }
    out
}

pub struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

pub fn conv1d_backward<T: Real>(
    x: &[T],
    w: &[T],
    dy: &[T],
    g: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> ConvGrads<T> {
    let (ck, lout, sx) = (g.cin * g.kernel, g.out_len, g.cin * g.len);
    let mut dx = need_dx.then(|| vec![T::zero(); x.len()]);
    let mut dw = need_dw.then(|| vec![T::zero(); w.len()]);
    let mut db = need_db.then(|| vec![T::zero(); g.cout]);
    let chunk = g.chunk();
    let ranges: Vec<(usize, usize)> = (0..g.kernel).map(|kk| g.valid_range(kk)).collect();
    let mut cols = vec![T::zero(); ck * chunk * lout];
    let mut dyt = vec![T::zero(); g.cout * chunk * lout];
    for b0 in (0..g.batch).step_by(chunk) {
        let nb = chunk.min(g.batch - b0);
        let ld = nb * lout;
        // gather dy into [cout, nb * lout]
        for i in 0..nb {
            for co in 0..g.cout {
                let o = ((b0 + i) * g.cout + co) * lout;
                dyt[co * ld + i * lout..co * ld + (i + 1) * lout].copy_from_slice(&dy[o..o + lout]);
            }
        }
        if let Some(db) = db.as_mut() {
            for (co, d) in db.iter_mut().enumerate() {
                *d += dyt[co * ld..(co + 1) * ld].iter().copied().sum::<T>();
            }
        }
        if let Some(dw) = dw.as_mut() {
            for i in 0..nb {
                im2col(&x[(b0 + i) * sx..(b0 + i + 1) * sx], g, &ranges, &mut cols, ld, i * lout);
            }
            // dw[cout, ck] += dy[cout, ld] * cols[ck, ld]^T
            gemm(g.cout, ld, ck, &dyt[..g.cout * ld], false, &cols[..ck * ld], true, dw, true);
        }
        if let Some(dx) = dx.as_mut() {
            gemm(ck, g.cout, ld, w, true, &dyt[..g.cout * ld], false, &mut cols[..ck * ld], false);
            for i in 0..nb {
                col2im(&cols, g, &ranges, ld, i * lout, &mut dx[(b0 + i) * sx..(b0 + i + 1) * sx]);
            }
        }
    }
    ConvGrads { dx, dw, db }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
        let mut out = vec![0.0; g.batch * g.cout * g.out_len];
        for b in 0..g.batch {
            for co in 0..g.cout {
                for j in 0..g.out_len {
                    let mut acc = 0.0;
                    for ci in 0..g.cin {
                        for kk in 0..g.kernel {
                            let p = (j * g.stride + kk * g.dilation) as isize - g.pad_left as isize;
                            if p >= 0 && (p as usize) < g.len {
                                acc += w[(co * g.cin + ci) * g.kernel + kk]
                                    * x[(b * g.cin + ci) * g.len + p as usize];
                            }
                        }
                    }
                    out[(b * g.cout + co) * g.out_len + j] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn matches_naive_over_geometries() {
        let mut seed = 1u64;
        let mut next = || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((seed >> 33) as f64 / (1u64 << 31) as f64) - 0.5
        };
        for &(k, s, d, pl, pr, l) in &[
            (3, 1, 1, 1, 1, 7),
            (5, 1, 2, 4, 4, 9),
            (3, 2, 1, 1, 1, 8),
            (7, 1, 4, 24, 0, 5),
            (1, 1, 1, 0, 0, 4),
            (3, 3, 2, 0, 2, 11),
        ] {
            let g = ConvGeom::new(2, 3, l, 4, k, s, d, pl, pr).unwrap();
            let x: Vec<f64> = (0..2 * 3 * l).map(|_| next()).collect();
            let w: Vec<f64> = (0..4 * 3 * k).map(|_| next()).collect();
            let got = conv1d_forward(&x, &w, None, &g);
            let want = naive(&x, &w, &g);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "k={k} s={s} d={d}");
            }
        }
    }

    #[test]
    fn too_short_input_has_no_geometry() {
        assert!(ConvGeom::new(1, 1, 2, 1, 5, 1, 1, 0, 0).is_none());
    }
}
