//! FID, KID and CLIP-score over pluggable embeddings.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayView3, Ix2};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::{ArchiveReader, ArchiveWriter};
use crate::error::{HcpError, Result};
use crate::tensor::{normal_matrix, resize_bilinear};

/// Eigenvalues down to this (relative) level are treated as zero.
pub const EIGEN_CLIP_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureSource {
    Real,
    Generated,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    /// `[n, f]`
    pub features: Array2<f64>,
    pub source: FeatureSource,
    pub embedder: String,
}

#[derive(Serialize, Deserialize)]
struct FeatureMeta {
    source: FeatureSource,
    embedder: String,
}

impl FeatureSet {
    pub fn new(features: Array2<f64>, source: FeatureSource, embedder: impl Into<String>) -> Result<Self> {
        if features.iter().any(|v| !v.is_finite()) {
            return Err(HcpError::Numerical("feature set has non-finite entries".into()));
        }
        Ok(Self {
            features,
            source,
            embedder: embedder.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn write_archive(&self, dir: &Path) -> Result<()> {
        let mut w = ArchiveWriter::create(dir)?;
        w.write_f64("features", self.features.shape(), self.features.iter().copied())?;
        w.set_metadata(serde_json::to_value(FeatureMeta {
            source: self.source,
            embedder: self.embedder.clone(),
        })?);
        w.finish()?;
        Ok(())
    }

    pub fn read_archive(dir: &Path) -> Result<Self> {
        let r = ArchiveReader::open(dir)?;
        let meta: FeatureMeta = serde_json::from_value(r.metadata().clone())?;
        let f = r
            .read("features")?
            .into_dimensionality::<Ix2>()
            .map_err(|e| HcpError::Validation(e.to_string()))?
            .mapv(f64::from);
        Self::new(f, meta.source, meta.embedder)
    }
}

fn mean_and_cov(x: ArrayView2<f64>) -> (Array1<f64>, DMatrix<f64>) {
    let (n, f) = x.dim();
    let mu = x.sum_axis(ndarray::Axis(0)) / n as f64;
    let mut cov = DMatrix::<f64>::zeros(f, f);
    for row in x.outer_iter() {
        let d = &row - &mu;
        for i in 0..f {
            for j in i..f {
                cov[(i, j)] += d[i] * d[j];
            }
        }
    }
    for i in 0..f {
        for j in i..f {
            let v = cov[(i, j)] / (n - 1) as f64;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    (mu, cov)
}

/// Symmetric PSD square root with small negative eigenvalues clipped.
fn psd_sqrt(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, &v| a.max(v.abs()));
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        if *v < -EIGEN_CLIP_TOLERANCE * scale {
            let max = eig.eigenvalues.max();
            let min = eig.eigenvalues.min();
            return Err(HcpError::Numerical(format!(
                "{what}: eigenvalue {v:e} below tolerance (spectrum [{min:e}, {max:e}], condition ≈ {:e})",
                max.abs() / min.abs().max(f64::MIN_POSITIVE)
            )));
        }
        *v = v.max(0.0).sqrt();
    }
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose())
}

fn check_pair(a: &FeatureSet, b: &FeatureSet, min_n: usize) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(HcpError::shape("feature sets", a.features.shape(), b.features.shape()));
    }
    if a.len() < min_n || b.len() < min_n {
        return Err(HcpError::Validation(format!(
            "need at least {min_n} feature vectors per set, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    for s in [a, b] {
        if s.features.iter().any(|v| !v.is_finite()) {
            return Err(HcpError::Numerical("feature set has non-finite entries".into()));
        }
    }
    Ok(())
}

/// Fréchet distance between Gaussian fits of the two sets. The trace of
/// `(Σ_A Σ_B)^{1/2}` is computed as that of `(Σ_A^{1/2} Σ_B Σ_A^{1/2})^{1/2}`.
pub fn fid(a: &FeatureSet, b: &FeatureSet) -> Result<f64> {
    check_pair(a, b, 2)?;
    let (mu_a, cov_a) = mean_and_cov(a.features.view());
    let (mu_b, cov_b) = mean_and_cov(b.features.view());
    let diff: f64 = (&mu_a - &mu_b).iter().map(|v| v * v).sum();
    let sa = psd_sqrt(&cov_a, "sqrt(Σ_A)")?;
    let inner = &sa * &cov_b * &sa;
    let cross = psd_sqrt(&inner, "sqrt(Σ_A^½ Σ_B Σ_A^½)")?;
    let value = diff + cov_a.trace() + cov_b.trace() - 2.0 * cross.trace();
    Ok(value.max(0.0))
}

fn poly_kernel(x: ArrayView1<f64>, y: ArrayView1<f64>, f: usize) -> f64 {
    let d: f64 = x.iter().zip(y.iter()).map(|(a, b)| a * b).sum();
    (d / f as f64 + 1.0).powi(3)
}

/// Unbiased MMD² U-statistic over paired samples:
/// `1/(m(m−1)) Σ_{i≠j} [k(x_i,x_j) + k(y_i,y_j) − k(x_i,y_j) − k(x_j,y_i)]`.
pub fn mmd2_unbiased(x: ArrayView2<f64>, y: ArrayView2<f64>) -> f64 {
    let m = x.nrows();
    let f = x.ncols();
    let mut s = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i == j {
                continue;
            }
            s += poly_kernel(x.row(i), x.row(j), f) + poly_kernel(y.row(i), y.row(j), f)
                - poly_kernel(x.row(i), y.row(j), f)
                - poly_kernel(x.row(j), y.row(i), f);
        }
    }
    s / (m * (m - 1)) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KidResult {
    pub mean: f64,
    pub std: f64,
}

/// Kernel Inception Distance: the MMD² estimate averaged over random
/// subsets (each drawn without replacement and kept in index order).
pub fn kid(a: &FeatureSet, b: &FeatureSet, subset_size: usize, subsets: usize, seed: u64) -> Result<KidResult> {
    check_pair(a, b, 2)?;
    if subset_size < 2 || subset_size > a.len().min(b.len()) {
        return Err(HcpError::Validation(format!(
            "subset size {subset_size} must lie in [2, {}]",
            a.len().min(b.len())
        )));
    }
    if subsets == 0 {
        return Err(HcpError::Validation("need at least one subset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(subsets);
    for _ in 0..subsets {
        let mut ia = sample(&mut rng, a.len(), subset_size).into_vec();
        let mut ib = sample(&mut rng, b.len(), subset_size).into_vec();
        ia.sort_unstable();
        ib.sort_unstable();
        let xa = a.features.select(ndarray::Axis(0), &ia);
        let xb = b.features.select(ndarray::Axis(0), &ib);
        values.push(mmd2_unbiased(xa.view(), xb.view()));
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
    } else {
        0.0
    };
    Ok(KidResult { mean, std })
}

/// Mean over rows of `100·max(0, cos(image_i, text_i))`.
pub fn clip_score(image: ArrayView2<f64>, text: ArrayView2<f64>) -> Result<f64> {
    if image.dim() != text.dim() {
        return Err(HcpError::shape("clip_score", image.shape(), text.shape()));
    }
    if image.nrows() == 0 {
        return Err(HcpError::Validation("clip_score needs at least one pair".into()));
    }
    let mut total = 0.0;
    for (k, (a, b)) in image.outer_iter().zip(text.outer_iter()).enumerate() {
        let na = a.dot(&a).sqrt();
        let nb = b.dot(&b).sqrt();
        if !(na > 0.0) || !(nb > 0.0) {
            return Err(HcpError::Degenerate(format!("pair {k} has a zero-norm embedding")));
        }
        let cos = (a.dot(&b) / (na * nb)).clamp(-1.0, 1.0);
        total += 100.0 * cos.max(0.0);
    }
    Ok(total / image.nrows() as f64)
}

/// Deterministic image embedder for tests: an 8×8 RGB thumbnail passed
/// through a fixed random projection and `tanh`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyEmbedder {
    pub seed: u64,
    projection: Array2<f64>,
}

impl ToyEmbedder {
    pub const THUMB: usize = 8;

    pub fn new(seed: u64, dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input = 3 * Self::THUMB * Self::THUMB;
        Self {
            seed,
            projection: normal_matrix(&mut rng, input, dim, 1.0 / (input as f64).sqrt()),
        }
    }

    pub fn id(&self) -> String {
        format!("toy-embedder:{}:{}", self.seed, self.projection.ncols())
    }

    /// Embeds an RGB image `[h, w, 3]` in `[0, 1]`.
    pub fn embed(&self, image: ArrayView3<f64>) -> Result<Array1<f64>> {
        if image.dim().2 != 3 {
            return Err(HcpError::shape("embedder input", image.shape(), &[3]));
        }
        let thumb = resize_bilinear(image.permuted_axes([2, 0, 1]), (Self::THUMB, Self::THUMB))?;
        let x: Array1<f64> = thumb.iter().map(|v| 2.0 * v - 1.0).collect();
        Ok(x.dot(&self.projection).mapv(f64::tanh))
    }

    pub fn embed_all(&self, images: &[ndarray::Array3<f64>], source: FeatureSource) -> Result<FeatureSet> {
        let dim = self.projection.ncols();
        let mut out = Array2::<f64>::zeros((images.len(), dim));
        for (k, img) in images.iter().enumerate() {
            out.row_mut(k).assign(&self.embed(img.view())?);
        }
        FeatureSet::new(out, source, self.id())
    }
}
