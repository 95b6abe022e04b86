//! Frechet distance between Gaussian fits of two embedding sets.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Fid {
    pub value: f64,
    /// Set when clamping could not hide a clearly indefinite covariance
    /// product, so the value is less precise than usual.
    pub degraded: bool,
}

/// Mean and unbiased covariance of the rows of `x` (`[n, d]`).
pub fn gaussian_fit(x: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = x.nrows();
    if n < 2 {
        return Err(Error::data("fid", format!("need at least 2 embeddings, got {n}")));
    }
    let mu = x.row_mean().transpose();
    let mut centered = x.clone();
    for mut r in centered.row_iter_mut() {
        r -= mu.transpose();
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    Ok((mu, cov))
}

fn sym_sqrt(m: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
    let e = SymmetricEigen::new(0.5 * (m + m.transpose()));
    let most_negative = e.eigenvalues.iter().fold(0.0f64, |a, &v| a.min(v));
    let s = e.eigenvalues.map(|v| v.max(0.0).sqrt());
    (&e.eigenvectors * DMatrix::from_diagonal(&s) * e.eigenvectors.transpose(), most_negative)
}

/// `|mu1 - mu2|^2 + tr(S1 + S2 - 2 (S1 S2)^(1/2))`, with the trace of the
/// square root taken from the eigenvalues of `S1^(1/2) S2 S1^(1/2)`.
pub fn frechet(mu1: &DVector<f64>, s1: &DMatrix<f64>, mu2: &DVector<f64>, s2: &DMatrix<f64>) -> Result<Fid> {
    let d = mu1.len();
    if mu2.len() != d || s1.shape() != (d, d) || s2.shape() != (d, d) {
        return Err(Error::shape("fid", "mismatched embedding dimensions"));
    }
    let (r1, neg1) = sym_sqrt(s1);
    let inner = &r1 * s2 * &r1;
    let e = SymmetricEigen::new(0.5 * (&inner + inner.transpose()));
    let neg2 = e.eigenvalues.iter().fold(0.0f64, |a, &v| a.min(v));
    let tr_sqrt: f64 = e.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let diff = mu1 - mu2;
    let raw = diff.dot(&diff) + s1.trace() + s2.trace() - 2.0 * tr_sqrt;
    let scale = s1.trace().abs() + s2.trace().abs() + 1e-300;
    let degraded = !raw.is_finite()
        || neg1 < -1e-9 * scale
        || neg2 < -1e-9 * scale * scale
        || raw < -1e-9 * scale;
    let value = if raw.is_finite() { raw.max(0.0) } else { f64::MAX };
    Ok(Fid { value, degraded })
}

/// FID between two embedding sets given as rows.
pub fn fid_from_embeddings(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<Fid> {
    if a.ncols() != b.ncols() {
        return Err(Error::shape("fid", format!("{} vs {} embedding dims", a.ncols(), b.ncols())));
    }
    let (m1, s1) = gaussian_fit(a)?;
    let (m2, s2) = gaussian_fit(b)?;
    frechet(&m1, &s1, &m2, &s2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random(n: usize, d: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, d, |_, j| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * (1.0 + j as f64) + 0.3 * j as f64
        })
    }

    #[test]
    fn identical_sets_give_zero() {
        let a = random(200, 8, 1);
        let f = fid_from_embeddings(&a, &a).unwrap();
        assert!(f.value < 1e-6 && !f.degraded, "{f:?}");
    }

    #[test]
    fn mean_shift_closed_form() {
        let a = random(300, 6, 2);
        let d = 0.7;
        let b = a.map(|v| v + d);
        let f = fid_from_embeddings(&a, &b).unwrap();
        let want = 6.0 * d * d;
        assert!((f.value - want).abs() / want < 1e-4, "{} vs {want}", f.value);
    }

    #[test]
    fn diagonal_covariances() {
        let mu1 = DVector::from_vec(vec![0.0, 1.0, -2.0]);
        let mu2 = DVector::from_vec(vec![0.5, 1.0, 0.0]);
        let v1 = [1.0, 4.0, 0.25];
        let v2 = [2.0, 1.0, 0.25];
        let s1 = DMatrix::from_diagonal(&DVector::from_vec(v1.to_vec()));
        let s2 = DMatrix::from_diagonal(&DVector::from_vec(v2.to_vec()));
        let f = frechet(&mu1, &s1, &mu2, &s2).unwrap();
        let mut want = (&mu1 - &mu2).norm_squared();
        for i in 0..3 {
            want += (v1[i].sqrt() - v2[i].sqrt()).powi(2);
        }
        assert!((f.value - want).abs() < 1e-12, "{} {want}", f.value);
    }

    #[test]
    fn rank_deficient_is_finite() {
        // more dimensions than samples
        let a = random(4, 10, 3);
        let b = random(4, 10, 4);
        let f = fid_from_embeddings(&a, &b).unwrap();
        assert!(f.value.is_finite() && f.value >= 0.0);
    }
}
