//! Multi-scale human-centric prior features.
//!
//! A prior image (pose skeleton or depth map) is resized to 256², passed
//! through a frozen feature extractor, and the last four stages are reduced
//! to the eight highest-variance channels each. The resulting stack has one
//! `[8, s, s]` map per attention scale `s ∈ {64, 32, 16, 8}`; each channel is
//! aligned with one attention head.

use std::cell::Cell;
use std::path::Path;

use ndarray::{Array2, Array3, ArrayView3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::archive::{ArchiveReader, ArchiveWriter};
use crate::error::{HcpError, Result};
use crate::imageio;
use crate::tensor::{avg_pool_chw, resize_bilinear, Linear};

/// Side length of preprocessed prior images.
pub const PRIOR_SIDE: usize = 256;
/// Spatial sides of the four stacked scales, finest first.
pub const PRIOR_SCALES: [usize; 4] = [64, 32, 16, 8];
/// Channels kept per scale; equals the attention head count.
pub const PRIOR_CHANNELS: usize = 8;

thread_local! {
    static PRIOR_READS: Cell<u64> = const { Cell::new(0) };
}

/// Number of prior images loaded from disk by the current thread.
pub fn prior_reads_on_this_thread() -> u64 {
    PRIOR_READS.with(Cell::get)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorKind {
    #[default]
    Pose,
    Depth,
}

/// Preprocessed prior image, `[256, 256, 3]` in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorImage {
    pixels: Array3<f64>,
    kind: PriorKind,
}

impl PriorImage {
    /// Normalises channel layout to RGB and resizes to 256².
    ///
    /// Grayscale inputs are replicated; alpha channels are dropped.
    pub fn new(pixels: Array3<f64>, kind: PriorKind) -> Result<Self> {
        let (h, w, c) = pixels.dim();
        if h == 0 || w == 0 || c == 0 {
            return Err(HcpError::Validation("prior image is empty".into()));
        }
        if pixels.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(HcpError::Validation(
                "prior image pixels must lie in [0, 1]".into(),
            ));
        }
        let rgb = match c {
            1 | 2 => Array3::from_shape_fn((h, w, 3), |(y, x, _)| pixels[[y, x, 0]]),
            3 => pixels,
            _ => pixels.slice(ndarray::s![.., .., 0..3]).to_owned(),
        };
        let chw = rgb.permuted_axes([2, 0, 1]);
        let resized = resize_bilinear(chw.view(), (PRIOR_SIDE, PRIOR_SIDE))?;
        let pixels = resized.permuted_axes([1, 2, 0]).as_standard_layout().to_owned();
        Ok(Self { pixels, kind })
    }

    /// Reads an 8- or 16-bit PNG. Every call is counted by
    /// [`prior_reads_on_this_thread`].
    pub fn load(path: &Path, kind: PriorKind) -> Result<Self> {
        PRIOR_READS.with(|c| c.set(c.get() + 1));
        Self::new(imageio::read_png(path)?, kind)
    }

    pub fn pixels(&self) -> &Array3<f64> {
        &self.pixels
    }

    pub fn kind(&self) -> PriorKind {
        self.kind
    }

    /// SHA-256 over the preprocessed pixel values.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for v in self.pixels.iter() {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    fn to_chw(&self) -> Array3<f64> {
        self.pixels
            .view()
            .permuted_axes([2, 0, 1])
            .as_standard_layout()
            .to_owned()
    }
}

/// A frozen image backbone producing stage maps `[C, h, w]` of strictly
/// decreasing resolution.
pub trait FeatureExtractor: Send + Sync {
    fn id(&self) -> String;
    fn extract(&self, image: &PriorImage) -> Result<Vec<Array3<f64>>>;
}

/// Deterministic five-stage extractor: each stage halves the resolution by
/// average pooling and applies a pointwise `affine → ReLU` channel mix.
/// A 256² input yields stages at 128², 64², 32², 16² and 8².
#[derive(Debug, Clone, PartialEq)]
pub struct ToyExtractor {
    pub seed: u64,
    pub stages: Vec<Linear>,
}

impl ToyExtractor {
    pub const STAGE_CHANNELS: usize = 16;
    pub const STAGES: usize = 5;

    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut stages = Vec::with_capacity(Self::STAGES);
        let mut fan_in = 3;
        for _ in 0..Self::STAGES {
            let mut l = Linear::random(&mut rng, fan_in, Self::STAGE_CHANNELS, 1.0 / (fan_in as f64).sqrt());
            for b in l.bias.iter_mut() {
                *b = rng.random_range(-0.05..0.1);
            }
            stages.push(l);
            fan_in = Self::STAGE_CHANNELS;
        }
        Self { seed, stages }
    }

    /// Same weights with every bias set to zero.
    pub fn without_bias(mut self) -> Self {
        for s in &mut self.stages {
            s.bias.fill(0.0);
        }
        self
    }

    fn mix(stage: &Linear, x: &Array3<f64>) -> Array3<f64> {
        let (c_in, h, w) = x.dim();
        let c_out = stage.output_dim();
        let mut out = Array3::<f64>::zeros((c_out, h, w));
        for o in 0..c_out {
            for y in 0..h {
                for xx in 0..w {
                    let mut s = stage.bias[o];
                    for i in 0..c_in {
                        s += x[[i, y, xx]] * stage.weight[[i, o]];
                    }
                    out[[o, y, xx]] = s.max(0.0);
                }
            }
        }
        out
    }
}

impl FeatureExtractor for ToyExtractor {
    fn id(&self) -> String {
        format!("toy-extractor-{}", self.seed)
    }

    fn extract(&self, image: &PriorImage) -> Result<Vec<Array3<f64>>> {
        let mut x = image.to_chw();
        let mut out = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let pooled = avg_pool_chw(x.view(), 2);
            x = Self::mix(stage, &pooled);
            out.push(x.clone());
        }
        Ok(out)
    }
}

/// Adapter for a pretrained classification backbone (e.g. ResNet-50) whose
/// stage outputs were computed elsewhere and stored in an array archive
/// under `<content hash>/stage<i>`.
#[derive(Debug, Clone)]
pub struct PrecomputedExtractor {
    id: String,
    archive: ArchiveReader,
}

impl PrecomputedExtractor {
    pub fn open(id: impl Into<String>, dir: impl AsRef<Path>) -> Result<Self> {
        Ok(Self {
            id: id.into(),
            archive: ArchiveReader::open(dir)?,
        })
    }
}

impl FeatureExtractor for PrecomputedExtractor {
    fn id(&self) -> String {
        self.id.clone()
    }

    fn extract(&self, image: &PriorImage) -> Result<Vec<Array3<f64>>> {
        let hash = image.content_hash();
        let mut out = Vec::new();
        for i in 0.. {
            let name = format!("{hash}/stage{i}");
            if !self.archive.contains(&name) {
                break;
            }
            let a = self.archive.read(&name)?;
            let a = a
                .into_dimensionality::<ndarray::Ix3>()
                .map_err(|e| HcpError::Contract(format!("{name}: {e}")))?;
            out.push(a.mapv(f64::from));
        }
        if out.is_empty() {
            return Err(HcpError::Contract(format!(
                "no precomputed stages for prior image {hash}"
            )));
        }
        Ok(out)
    }
}

/// Runs the extractor and returns its last four stages, finest first.
pub fn extract_stage_features(
    image: &PriorImage,
    extractor: &dyn FeatureExtractor,
) -> Result<Vec<Array3<f64>>> {
    let mut stages = extractor.extract(image)?;
    if stages.len() < PRIOR_SCALES.len() {
        return Err(HcpError::Contract(format!(
            "extractor `{}` produced {} stages, need at least {}",
            extractor.id(),
            stages.len(),
            PRIOR_SCALES.len()
        )));
    }
    let tail = stages.split_off(stages.len() - PRIOR_SCALES.len());
    let sizes: Vec<(usize, usize)> = tail.iter().map(|m| (m.dim().1, m.dim().2)).collect();
    let expected: Vec<(usize, usize)> = PRIOR_SCALES.iter().map(|&s| (s, s)).collect();
    if sizes != expected {
        return Err(HcpError::Contract(format!(
            "extractor `{}` last four stages have sizes {sizes:?} for a {PRIOR_SIDE}² input; expected {{64², 32², 16², 8²}}",
            extractor.id()
        )));
    }
    Ok(tail)
}

/// Population variance of every channel over its spatial positions.
pub fn channel_variances(map: ArrayView3<f64>) -> Vec<f64> {
    map.outer_iter()
        .map(|ch| {
            let n = ch.len() as f64;
            let mean = ch.sum() / n;
            ch.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
        })
        .collect()
}

/// The `k` channels with the largest spatial variance, most variable first;
/// ties go to the lower channel index.
pub fn select_top_variance_channels(map: ArrayView3<f64>, k: usize) -> Result<Array3<f64>> {
    let c = map.dim().0;
    if c < k {
        return Err(HcpError::Validation(format!(
            "cannot select {k} channels from a map with {c}"
        )));
    }
    let var = channel_variances(map);
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| var[b].total_cmp(&var[a]).then(a.cmp(&b)));
    order.truncate(k);
    Ok(map.select(Axis(0), &order))
}

/// Bilinear resize to `target`; identity when the size already matches.
pub fn resize_to_scale(map: ArrayView3<f64>, target: (usize, usize)) -> Result<Array3<f64>> {
    resize_bilinear(map, target)
}

/// Per-scale prior maps, finest first, each `[8, s, s]` with unit-norm
/// channels.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorFeatureStack {
    pub per_scale: Vec<Array3<f64>>,
    pub source_stage_ids: Vec<String>,
}

impl PriorFeatureStack {
    pub fn validate(&self) -> Result<()> {
        if self.per_scale.len() != PRIOR_SCALES.len() {
            return Err(HcpError::Validation(format!(
                "prior stack has {} scales, expected {}",
                self.per_scale.len(),
                PRIOR_SCALES.len()
            )));
        }
        for (m, &s) in self.per_scale.iter().zip(PRIOR_SCALES.iter()) {
            if m.dim() != (PRIOR_CHANNELS, s, s) {
                return Err(HcpError::shape(
                    "prior stack scale",
                    m.shape(),
                    &[PRIOR_CHANNELS, s, s],
                ));
            }
        }
        Ok(())
    }

    /// The map for a layer of side `side`, flattened to `[8, side²]`
    /// (row-major positions, matching attention query order).
    pub fn for_side(&self, side: usize) -> Result<Array2<f64>> {
        let idx = PRIOR_SCALES
            .iter()
            .position(|&s| s == side)
            .ok_or_else(|| HcpError::Validation(format!("no prior scale with side {side}")))?;
        let m = &self.per_scale[idx];
        Ok(m.to_shape((PRIOR_CHANNELS, side * side))
            .map_err(|e| HcpError::Validation(e.to_string()))?
            .to_owned())
    }

    pub fn write_archive(&self, dir: &Path) -> Result<()> {
        let mut w = ArchiveWriter::create(dir)?;
        for (m, &s) in self.per_scale.iter().zip(PRIOR_SCALES.iter()) {
            w.write_f64(&format!("scale{s}"), m.shape(), m.iter().copied())?;
        }
        w.set_metadata(serde_json::json!({ "source_stage_ids": self.source_stage_ids }));
        w.finish()?;
        Ok(())
    }

    pub fn read_archive(dir: &Path) -> Result<Self> {
        let r = ArchiveReader::open(dir)?;
        let mut per_scale = Vec::new();
        for s in PRIOR_SCALES {
            let a = r.read(&format!("scale{s}"))?;
            let a = a
                .into_dimensionality::<ndarray::Ix3>()
                .map_err(|e| HcpError::Validation(e.to_string()))?;
            per_scale.push(a.mapv(f64::from));
        }
        let source_stage_ids = serde_json::from_value(r.metadata()["source_stage_ids"].clone())?;
        let stack = Self {
            per_scale,
            source_stage_ids,
        };
        stack.validate()?;
        Ok(stack)
    }
}

/// Extracts, selects, resizes and normalises the prior stack of one image.
pub fn build_prior_stack(
    image: &PriorImage,
    extractor: &dyn FeatureExtractor,
) -> Result<PriorFeatureStack> {
    let stages = extract_stage_features(image, extractor)?;
    let mut per_scale = Vec::with_capacity(stages.len());
    let mut ids = Vec::with_capacity(stages.len());
    for (i, (stage, &side)) in stages.iter().zip(PRIOR_SCALES.iter()).enumerate() {
        let selected = select_top_variance_channels(stage.view(), PRIOR_CHANNELS)?;
        let mut m = resize_to_scale(selected.view(), (side, side))?;
        for (ch, mut plane) in m.outer_iter_mut().enumerate() {
            let norm = plane.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm > 0.0) || !norm.is_finite() {
                return Err(HcpError::Degenerate(format!(
                    "prior feature channel {ch} at scale {side}² has zero norm"
                )));
            }
            plane /= norm;
        }
        per_scale.push(m);
        ids.push(format!("{}:last4[{i}]", extractor.id()));
    }
    let stack = PriorFeatureStack {
        per_scale,
        source_stage_ids: ids,
    };
    stack.validate()?;
    Ok(stack)
}
