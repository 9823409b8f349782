//! Embedding interpolation, decoded interpolation datasets and the Fréchet distance metric.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rayon::prelude::*;

use crate::classifier::Classifier;
use crate::data::ImageSet;
use crate::decoder::Decoder;
use crate::error::{Error, Result};
use crate::projection::{Embedding, PcaModel};
use crate::rng::stream_rng;
use crate::tensor::{gemm, MatRef, Real};

/// Default sweep; FID is symmetric in `α ↔ 1 − α`, so only the lower half is visited.
pub const DEFAULT_ALPHAS: [f64; 5] = [0.0, 0.125, 0.25, 0.375, 0.5];

/// Relative ridge added to both covariances before the square root in [`fid_curve`].
pub const COVARIANCE_RIDGE: f64 = 1e-6;

/// Checks `0 ≤ alpha ≤ 1`.
pub fn check_alpha(alpha: f64) -> Result<f64> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(alpha)
    } else {
        Err(Error::invalid("alpha", format!("mixing coefficient {alpha} outside [0, 1]")))
    }
}

/// `(1 − α)·z1 + α·z2`, evaluated in f64.
pub fn interpolate(z1: &[f32], z2: &[f32], alpha: f64) -> Result<Vec<f32>> {
    check_alpha(alpha)?;
    if z1.len() != z2.len() {
        return Err(Error::shape("interpolate", "embedding length", z1.len(), z2.len()));
    }
    Ok(z1
        .iter()
        .zip(z2)
        .map(|(&a, &b)| ((1.0 - alpha) * a as f64 + alpha * b as f64) as f32)
        .collect())
}

/// Decoded images for one mixing coefficient.
#[derive(Clone, Debug, PartialEq)]
pub struct AlphaDataset {
    pub alpha: f64,
    pub seed: u64,
    /// Positions into the embedding collection, one pair per image.
    pub pairs: Vec<(usize, usize)>,
    pub images: ImageSet,
}

impl AlphaDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// `n` pairs drawn uniformly with replacement; equal seeds give equal pairs for every α.
pub fn draw_pairs(pool: usize, n: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
    if pool == 0 {
        return Err(Error::invalid("draw_pairs", "empty embedding collection"));
    }
    let mut rng = stream_rng(seed, 0);
    Ok((0..n).map(|_| (rng.random_range(0..pool), rng.random_range(0..pool))).collect())
}

/// Mode-decodes the convex combinations of `pairs` at `alpha`, in parallel chunks.
pub fn decode_pairs<T: Real>(
    embeddings: &[Embedding],
    decoder: &Decoder<T>,
    pairs: &[(usize, usize)],
    alpha: f64,
) -> Result<ImageSet> {
    check_alpha(alpha)?;
    let c = decoder.config();
    let pixels: Vec<Vec<u8>> = pairs
        .par_chunks(64)
        .map(|chunk| {
            let zs: Vec<Vec<f32>> = chunk
                .iter()
                .map(|&(a, b)| {
                    let (za, zb) = (get(embeddings, a)?, get(embeddings, b)?);
                    interpolate(&za.values, &zb.values, alpha)
                })
                .collect::<Result<_>>()?;
            let refs: Vec<&[f32]> = zs.iter().map(Vec::as_slice).collect();
            decoder.decode_mode(&refs, 64)
        })
        .collect::<Result<_>>()?;
    ImageSet::new(c.height, c.width, c.levels as u32, pixels.concat(), None)
}

fn get(embeddings: &[Embedding], i: usize) -> Result<&Embedding> {
    embeddings
        .get(i)
        .ok_or_else(|| Error::invalid("interpolation", format!("pair index {i} beyond {} embeddings", embeddings.len())))
}

/// Decoded interpolations for `n` uniformly drawn embedding pairs.
pub fn generate_alpha_dataset<T: Real>(
    embeddings: &[Embedding],
    decoder: &Decoder<T>,
    alpha: f64,
    n: usize,
    seed: u64,
) -> Result<AlphaDataset> {
    if n == 0 {
        return Err(Error::invalid("generate_alpha_dataset", "N must be at least 1"));
    }
    let pairs = draw_pairs(embeddings.len(), n, seed)?;
    let images = decode_pairs(embeddings, decoder, &pairs, alpha)?;
    Ok(AlphaDataset { alpha, seed, pairs, images })
}

/// Sample mean and covariance of a feature set.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mean: Vec<f64>,
    /// Row-major `dim × dim`, symmetric.
    pub cov: Vec<f64>,
    pub count: usize,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn trace(&self) -> f64 {
        let d = self.dim();
        (0..d).map(|i| self.cov[i * d + i]).sum()
    }

    /// Adds `rel · mean(diag(Σ)) · I` to the covariance.
    pub fn regularized(&self, rel: f64) -> GaussianStats {
        let d = self.dim();
        let ridge = rel * self.trace() / d.max(1) as f64;
        let mut cov = self.cov.clone();
        for i in 0..d {
            cov[i * d + i] += ridge;
        }
        GaussianStats { cov, ..self.clone() }
    }
}

/// Mean and unbiased covariance of the rows, computed in two passes.
pub fn gaussian_stats(features: &[Vec<f64>]) -> Result<GaussianStats> {
    let n = features.len();
    if n < 2 {
        return Err(Error::invalid("gaussian_stats", format!("need at least 2 samples, got {n}")));
    }
    let d = features[0].len();
    if let Some(r) = features.iter().find(|r| r.len() != d) {
        return Err(Error::shape("gaussian_stats", "feature length", d, r.len()));
    }
    let mut mean = vec![0.0; d];
    for r in features {
        mean.iter_mut().zip(r).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut centered = Vec::with_capacity(n * d);
    for r in features {
        centered.extend(r.iter().zip(&mean).map(|(v, m)| v - m));
    }
    let mut cov = vec![0.0; d * d];
    let x = MatRef::new(&centered, n, d);
    gemm(1.0 / (n - 1) as f64, x.t(), x, 0.0, &mut cov);
    for i in 0..d {
        for j in 0..i {
            let s = 0.5 * (cov[i * d + j] + cov[j * d + i]);
            cov[i * d + j] = s;
            cov[j * d + i] = s;
        }
    }
    if cov.iter().chain(&mean).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            op: "gaussian_stats",
            context: Some("feature moments".into()),
        });
    }
    Ok(GaussianStats { mean, cov, count: n })
}

/// Eigenvalues of a symmetric matrix, rejecting negatives larger than `1e-6 · |trace|`.
fn psd_eigen(m: DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let trace = m.trace().abs();
    let eig = SymmetricEigen::new(m);
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if min < -1e-6 * trace.max(f64::MIN_POSITIVE) {
        return Err(Error::invalid(
            "frechet_distance",
            format!("{what} is not positive semi-definite (eigenvalue {min:e}, trace {trace:e})"),
        ));
    }
    Ok(eig)
}

/// `‖μ1 − μ2‖² + tr(Σ1 + Σ2 − 2 (Σ1^½ Σ2 Σ1^½)^½)`.
pub fn frechet_distance(s1: &GaussianStats, s2: &GaussianStats) -> Result<f64> {
    let d = s1.dim();
    if s2.dim() != d {
        return Err(Error::shape("frechet_distance", "feature dim", d, s2.dim()));
    }
    let mean_term: f64 = s1.mean.iter().zip(&s2.mean).map(|(a, b)| (a - b) * (a - b)).sum();
    let c1 = DMatrix::from_row_slice(d, d, &s1.cov);
    let c2 = DMatrix::from_row_slice(d, d, &s2.cov);
    let e1 = psd_eigen(c1, "first covariance")?;
    let roots = e1.eigenvalues.map(|l| l.max(0.0).sqrt());
    let sqrt1 = &e1.eigenvectors * DMatrix::from_diagonal(&roots) * e1.eigenvectors.transpose();
    let inner = &sqrt1 * c2 * &sqrt1;
    let inner = (&inner + inner.transpose()) * 0.5;
    let e = psd_eigen(inner, "covariance product")?;
    let cross: f64 = e.eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    let fd = mean_term + s1.trace() + s2.trace() - 2.0 * cross;
    if !fd.is_finite() {
        return Err(Error::NonFinite {
            op: "frechet_distance",
            context: Some("distance".into()),
        });
    }
    // the true distance is non-negative; rounding can leave a hair below zero
    Ok(fd.max(0.0))
}

/// Maps images to feature vectors for the distance metric.
#[derive(Clone, Debug, PartialEq)]
pub enum FeatureExtractor {
    /// Flattened pixel intensities in `[0, 1]`.
    Raw,
    /// Principal components of the intensities.
    Pca(PcaModel),
    /// Penultimate activations of a trained classifier.
    Classifier(Classifier),
}

impl FeatureExtractor {
    pub fn name(&self) -> &'static str {
        match self {
            FeatureExtractor::Raw => "raw",
            FeatureExtractor::Pca(_) => "pca",
            FeatureExtractor::Classifier(_) => "classifier",
        }
    }

    pub fn features(&self, images: &ImageSet) -> Result<Vec<Vec<f64>>> {
        let scale = 1.0 / (images.levels.max(2) - 1) as f64;
        let intensities = |i: usize| -> Vec<f64> { images.image(i).iter().map(|&v| v as f64 * scale).collect() };
        match self {
            FeatureExtractor::Raw => Ok((0..images.len()).map(intensities).collect()),
            FeatureExtractor::Pca(p) => (0..images.len()).into_par_iter().map(|i| p.apply(&intensities(i))).collect(),
            FeatureExtractor::Classifier(c) => {
                let cfg = c.config();
                if (cfg.height, cfg.width, cfg.levels) != (images.height, images.width, images.levels as usize) {
                    return Err(Error::invalid("features", "image shape or levels differ from the classifier's"));
                }
                let refs: Vec<&[u8]> = (0..images.len()).map(|i| images.image(i)).collect();
                let rows: Vec<Vec<Vec<f64>>> = refs.par_chunks(256).map(|c2| c.features(c2)).collect::<Result<_>>()?;
                Ok(rows.concat())
            }
        }
    }
}

/// One point of a FID curve.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FidPoint {
    pub alpha: f64,
    pub fid: f64,
    pub n: usize,
}

/// FID between `reference` features and each decoded α-dataset, both covariances ridge-regularized.
///
/// All α share the same pairs so the curve varies only with the mixing coefficient.
pub fn fid_curve<T: Real>(
    embeddings: &[Embedding],
    decoder: &Decoder<T>,
    reference: &GaussianStats,
    extractor: &FeatureExtractor,
    alphas: &[f64],
    n: usize,
    seed: u64,
) -> Result<Vec<FidPoint>> {
    let reference = reference.regularized(COVARIANCE_RIDGE);
    let mut out = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let ds = generate_alpha_dataset(embeddings, decoder, alpha, n, seed)?;
        let stats = gaussian_stats(&extractor.features(&ds.images)?)?.regularized(COVARIANCE_RIDGE);
        let fid = frechet_distance(&reference, &stats)?;
        log::info!("fid alpha {alpha}: {fid:.4} (n = {n}, extractor {})", extractor.name());
        out.push(FidPoint { alpha, fid, n });
    }
    Ok(out)
}
