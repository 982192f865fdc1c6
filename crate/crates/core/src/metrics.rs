//! Desk-scale generation quality metric: Frechet distance between feature
//! distributions of real and generated images.
//!
//! Features come from a small frozen random-projection conv stack, so the
//! numbers are comparable only across runs of this codebase. They are
//! labeled "proxy-FID" everywhere they are printed.

use nalgebra::{DMatrix, DVector};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::kernels;
use crate::rng::{randn, seed_rng};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const FEATURE_DIM: usize = 64;

const EXTRACTOR_SEED: u64 = 0x70686f746f;

/// Frozen three-layer strided conv stack ending in global average
/// pooling. The weights come from a fixed named seed and never train.
pub struct FeatureExtractor {
    kernels: [Tensor<f64>; 3],
}

impl FeatureExtractor {
    pub fn frozen() -> Self {
        let dims = [(3usize, 16usize), (16, 32), (32, FEATURE_DIM)];
        let kernels = dims.map(|(ci, co)| {
            let rng = &mut seed_rng(EXTRACTOR_SEED, &format!("metrics.conv{ci}x{co}"));
            let w: Tensor<f64> = randn(rng, &[3, 3, ci, co]);
            w.scale(1.0 / (9.0 * ci as f64).sqrt())
        });
        FeatureExtractor { kernels }
    }

    /// Maps `[N, H, W, 3]` images to `[N, 64]` feature vectors.
    pub fn features<T: Scalar>(&self, images: &Tensor<T>) -> Result<Tensor<f64>> {
        let s = images.shape();
        if s.len() != 4 || s[3] != 3 {
            return Err(Error::invalid("features", format!("expected [N, H, W, 3], got {s:?}")));
        }
        if s[1] < 8 || s[2] < 8 {
            return Err(Error::invalid("features", "images must be at least 8x8"));
        }
        let mut x: Tensor<f64> = images.map_convert();
        for k in &self.kernels {
            let (y, _) = kernels::conv2d_fwd(&x, k, 2, 1);
            x = y.map(|v| if v >= 0.0 { v } else { 0.2 * v });
        }
        let xs = x.shape().to_vec();
        let (n, hw, c) = (xs[0], xs[1] * xs[2], xs[3]);
        let mut out = Tensor::zeros(&[n, c]);
        for ni in 0..n {
            for p in 0..hw {
                for ci in 0..c {
                    let v = x.data()[(ni * hw + p) * c + ci];
                    out.data_mut()[ni * c + ci] += v / hw as f64;
                }
            }
        }
        Ok(out)
    }
}

/// Sample mean and covariance (ddof = 1) of `[N, D]` feature rows.
pub fn feature_stats(f: &Tensor<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let s = f.shape();
    if s.len() != 2 || s[0] < 2 {
        return Err(Error::invalid("feature_stats", format!("need [N>=2, D] features, got {s:?}")));
    }
    let (n, d) = (s[0], s[1]);
    let mut mu = DVector::zeros(d);
    for row in 0..n {
        for j in 0..d {
            mu[j] += f.data()[row * d + j] / n as f64;
        }
    }
    let mut cov = DMatrix::zeros(d, d);
    for row in 0..n {
        let centered: Vec<f64> = (0..d).map(|j| f.data()[row * d + j] - mu[j]).collect();
        for i in 0..d {
            for j in 0..d {
                cov[(i, j)] += centered[i] * centered[j] / (n - 1) as f64;
            }
        }
    }
    Ok((mu, cov))
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()).scale(0.5);
    let eig = nalgebra::SymmetricEigen::new(sym);
    let roots = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
    &eig.eigenvectors * roots * eig.eigenvectors.transpose()
}

/// Frechet distance between two Gaussians given their moments:
/// `|mu_r - mu_f|^2 + tr(S_r + S_f - 2 (S_r S_f)^{1/2})`, with negative
/// eigenvalues clamped to zero inside both matrix square roots.
pub fn frechet_from_stats(
    mu_r: &DVector<f64>,
    cov_r: &DMatrix<f64>,
    mu_f: &DVector<f64>,
    cov_f: &DMatrix<f64>,
) -> f64 {
    let dmu = (mu_r - mu_f).norm_squared();
    let s = psd_sqrt(cov_r);
    let inner = &s * cov_f * &s;
    let sym = (&inner + inner.transpose()).scale(0.5);
    let eig = nalgebra::SymmetricEigen::new(sym);
    let cross: f64 = eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).sum();
    (dmu + cov_r.trace() + cov_f.trace() - 2.0 * cross).max(0.0)
}

/// Frechet distance between two feature sets of shape `[N, D]`.
/// Each set needs at least D/2 samples for a usable covariance.
pub fn proxy_frechet_features(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    for (name, t) in [("first", a), ("second", b)] {
        let s = t.shape();
        if s.len() != 2 || s[0] < s[1] / 2 {
            return Err(Error::invalid(
                "proxy_frechet",
                format!("{name} set has {} samples for {} dims; need at least {}", s[0], s[1], s[1] / 2),
            ));
        }
    }
    let (mu_r, cov_r) = feature_stats(a)?;
    let (mu_f, cov_f) = feature_stats(b)?;
    Ok(frechet_from_stats(&mu_r, &cov_r, &mu_f, &cov_f))
}

/// Proxy-FID between a dataset and a batch of generated images.
pub fn proxy_frechet<T: Scalar>(
    extractor: &FeatureExtractor,
    real: &Dataset<T>,
    fake: &Tensor<T>,
) -> Result<f64> {
    let indices: Vec<usize> = (0..real.len()).collect();
    let real_feats = extractor.features(&real.batch(&indices)?)?;
    let fake_feats = extractor.features(fake)?;
    proxy_frechet_features(&real_feats, &fake_feats)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frozen_extractor_is_reproducible() {
        let imgs: Tensor<f32> = randn(&mut seed_rng(51, "test.imgs"), &[2, 16, 16, 3]);
        let a = FeatureExtractor::frozen().features(&imgs).unwrap();
        let b = FeatureExtractor::frozen().features(&imgs).unwrap();
        assert_eq!(a.shape(), &[2, 64]);
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn stats_match_closed_forms_on_two_points() {
        let f = Tensor::from_vec(&[2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let (mu, cov) = feature_stats(&f).unwrap();
        assert_eq!(mu[0], 1.0);
        assert_eq!(mu[1], 2.0);
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(cov[(i, j)], 2.0);
            }
        }
    }

    #[test]
    fn small_sets_are_rejected() {
        let a = Tensor::zeros(&[10, 64]);
        let b = Tensor::zeros(&[64, 64]);
        assert!(proxy_frechet_features(&a, &b).is_err());
        assert!(proxy_frechet_features(&b, &a).is_err());
    }
}
