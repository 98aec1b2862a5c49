//! Desk-scale evaluation proxies: pixel diversity, a Fréchet distance on
//! discriminator features, and interpolation smoothness.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::losses::{interpolation_set, pooled_size, InterpolationSpec};
use crate::nets::Generator;
use crate::tensor::{Graph, Tensor};

const DIAG_LOADING: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub pairwise_diversity: f64,
    pub ffd: f64,
    pub smoothness: f64,
}

/// Mean over unordered pairs of `|a - b|_2 / sqrt(N)` with `N` the pixel count.
pub fn pairwise_diversity(images: &[Tensor]) -> Result<f64> {
    if images.len() < 2 {
        return Err(Error::Invalid(format!(
            "diversity needs at least 2 images, got {}",
            images.len()
        )));
    }
    let n = images[0].numel();
    for t in images {
        if t.shape() != images[0].shape() {
            return Err(Error::Shape {
                op: "pairwise_diversity",
                left: images[0].shape().to_vec(),
                right: t.shape().to_vec(),
            });
        }
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..images.len() {
        for j in i + 1..images.len() {
            let sq: f64 = images[i]
                .data()
                .iter()
                .zip(images[j].data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            total += (sq / n as f64).sqrt();
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

fn moments(set: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let n = set.len();
    let d = set[0].len();
    let mut mu = DVector::zeros(d);
    for v in set {
        mu += DVector::from_column_slice(v);
    }
    mu /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for v in set {
        let c = DVector::from_column_slice(v) - &mu;
        cov.ger(1.0, &c, &c, 1.0);
    }
    cov /= (n - 1) as f64;
    for i in 0..d {
        cov[(i, i)] += DIAG_LOADING;
    }
    (mu, cov)
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrize(m));
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `|mu_r - mu_f|^2 + tr(S_r + S_f - 2 (S_r S_f)^(1/2))` with unbiased
/// covariances loaded by `1e-6` on the diagonal. The trace of the product
/// root is taken as `tr (S_r^(1/2) S_f S_r^(1/2))^(1/2)`.
pub fn frechet_feature_distance(real: &[Vec<f64>], fake: &[Vec<f64>]) -> Result<f64> {
    if real.len() < 2 || fake.len() < 2 {
        return Err(Error::Invalid(
            "Fréchet distance needs at least 2 vectors per side".into(),
        ));
    }
    let d = real[0].len();
    if let Some(bad) = real.iter().chain(fake).find(|v| v.len() != d) {
        return Err(Error::Shape {
            op: "frechet_feature_distance",
            left: vec![d],
            right: vec![bad.len()],
        });
    }
    let (mu_r, cov_r) = moments(real);
    let (mu_f, cov_f) = moments(fake);
    let root_r = psd_sqrt(&cov_r);
    let inner = symmetrize(&(&root_r * &cov_f * &root_r));
    let cross: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .sum();
    let mean_term = (&mu_r - &mu_f).norm_squared();
    let value = mean_term + cov_r.trace() + cov_f.trace() - 2.0 * cross;
    if !value.is_finite() {
        return Err(Error::NonFinite("frechet_feature_distance".into()));
    }
    Ok(value.max(0.0))
}

/// `max / mean` of consecutive (non-cyclic) distances; 1.0 when every
/// distance is zero.
pub fn smoothness_from_distances(distances: &[f64]) -> f64 {
    let mean = distances.iter().sum::<f64>() / distances.len() as f64;
    if mean <= 0.0 {
        return 1.0;
    }
    distances.iter().cloned().fold(0.0, f64::max) / mean
}

/// Smoothness of a `[k, c, h, w]` feature path, pooled as in the distance regularizer.
pub fn feature_path_smoothness(features: &Tensor) -> Result<f64> {
    let s = features.shape().to_vec();
    if s.len() != 4 || s[0] < 3 {
        return Err(Error::Invalid(format!(
            "smoothness needs k >= 3 feature maps, got {s:?}"
        )));
    }
    let mut g = Graph::new();
    let f = g.constant(features);
    let pooled = g.adaptive_avg_pool2d(f, pooled_size(s[2]), pooled_size(s[3]))?;
    let pooled = g.value(pooled);
    let per = pooled.len() / s[0];
    let distances: Vec<f64> = (0..s[0] - 1)
        .map(|i| {
            pooled[i * per..(i + 1) * per]
                .iter()
                .zip(&pooled[(i + 1) * per..(i + 2) * per])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    Ok(smoothness_from_distances(&distances))
}

/// Generates `k` interpolants between two latents and measures the
/// smoothness of their generator features.
pub fn interpolation_smoothness(
    gen: &Generator,
    z_start: &[f64],
    z_end: &[f64],
    k: usize,
) -> Result<f64> {
    if k < 3 {
        return Err(Error::Invalid(format!("smoothness needs k >= 3, got {k}")));
    }
    let path = interpolation_set(&InterpolationSpec {
        z_start: z_start.to_vec(),
        z_end: z_end.to_vec(),
        k,
    })?;
    let (_, features) = gen.generate(&path)?;
    feature_path_smoothness(&features)
}
