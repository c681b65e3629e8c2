//! Training objectives: the human-centric alignment loss, the stage-aware
//! cosine weight `λ^l(t)`, the denoising loss and their combination
//! `L = α·Σ_l λ^l(t)·L_hca^l + L_ldm`.

use std::collections::BTreeMap;
use std::f64::consts::FRAC_PI_2;
use std::fmt;

use ndarray::{Array3, ArrayView2, ArrayView3, ArrayViewD, ArrayD};
use serde::{Deserialize, Serialize};

use crate::error::{HcpError, Result};

/// Identifier of a cross-attention layer in a backbone descriptor.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LayerId(pub String);

impl LayerId {
    pub fn new(s: impl Into<String>) -> Self {
        Self(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for LayerId {
    fn from(s: &str) -> Self {
        Self(s.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Down,
    Mid,
    Up,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Down => "down",
            Stage::Mid => "mid",
            Stage::Up => "up",
        })
    }
}

/// `λ(t)` of one stage: down `cos(t/T·π/2)`, mid `cos((t−T)/T·π/2)`,
/// up `cos((2t−T)/T·π/2)`.
pub fn stage_lambda(stage: Stage, t: f64, t_max: f64) -> f64 {
    let x = match stage {
        Stage::Down => t / t_max,
        Stage::Mid => (t - t_max) / t_max,
        Stage::Up => (2.0 * t - t_max) / t_max,
    };
    (x * FRAC_PI_2).cos().clamp(0.0, 1.0)
}

/// Ordered assignment of layers to stages. Stages appear as contiguous
/// runs in down → mid → up order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StagePartition {
    layers: Vec<(LayerId, Stage)>,
}

impl StagePartition {
    pub fn new(layers: Vec<(LayerId, Stage)>) -> Result<Self> {
        let mut seen = std::collections::BTreeSet::new();
        for (id, _) in &layers {
            if !seen.insert(id) {
                return Err(HcpError::Validation(format!("layer `{id}` appears twice")));
            }
        }
        if layers.windows(2).any(|w| w[1].1 < w[0].1) {
            return Err(HcpError::Validation(
                "stages must be contiguous in down, mid, up order".into(),
            ));
        }
        Ok(Self { layers })
    }

    pub fn stage_of(&self, layer: &LayerId) -> Option<Stage> {
        self.layers.iter().find(|(id, _)| id == layer).map(|(_, s)| *s)
    }

    pub fn layers(&self) -> &[(LayerId, Stage)] {
        &self.layers
    }
}

/// Per-stage switches for the cosine weighting; a disabled stage uses the
/// constant weight 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageToggles {
    pub down: bool,
    pub mid: bool,
    pub up: bool,
}

impl Default for StageToggles {
    fn default() -> Self {
        Self {
            down: true,
            mid: true,
            up: true,
        }
    }
}

impl StageToggles {
    pub fn enabled(&self, stage: Stage) -> bool {
        match stage {
            Stage::Down => self.down,
            Stage::Mid => self.mid,
            Stage::Up => self.up,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightSchedule {
    pub t_max: u32,
    pub partition: StagePartition,
    pub cosine: StageToggles,
}

impl WeightSchedule {
    pub fn new(t_max: u32, partition: StagePartition) -> Result<Self> {
        if t_max == 0 {
            return Err(HcpError::Validation("T must be at least 1".into()));
        }
        Ok(Self {
            t_max,
            partition,
            cosine: StageToggles::default(),
        })
    }

    pub fn with_toggles(mut self, cosine: StageToggles) -> Self {
        self.cosine = cosine;
        self
    }

    pub fn lambda(&self, layer: &LayerId, t: u32) -> Result<f64> {
        if t > self.t_max {
            return Err(HcpError::Validation(format!(
                "timestep {t} exceeds T = {}",
                self.t_max
            )));
        }
        let stage = self
            .partition
            .stage_of(layer)
            .ok_or_else(|| HcpError::Validation(format!("layer `{layer}` is not in the partition")))?;
        if !self.cosine.enabled(stage) {
            return Ok(1.0);
        }
        Ok(stage_lambda(stage, t as f64, self.t_max as f64))
    }
}

fn check_alignment_inputs(h: ArrayView2<f64>, m_h: ArrayView3<f64>, indices: &[usize]) -> Result<()> {
    if indices.is_empty() {
        return Err(HcpError::Validation("human-centric index set is empty".into()));
    }
    let (heads, p, n) = m_h.dim();
    if h.dim() != (heads, p) {
        return Err(HcpError::shape("alignment_loss: H vs M_h", h.shape(), m_h.shape()));
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
        return Err(HcpError::Validation(format!(
            "token index {bad} out of range for {n} tokens"
        )));
    }
    Ok(())
}

/// Alignment loss and its gradient with respect to `M_h`.
///
/// `H` is `[heads, P]`, `M_h` is `[heads, P, N]`. Cosine similarity is taken
/// per head over spatial positions, averaged over heads, and the cosine
/// distance is averaged over the indices in `I_h`. Columns outside `I_h`
/// get exactly zero gradient.
pub fn alignment_loss_with_grad(
    h: ArrayView2<f64>,
    m_h: ArrayView3<f64>,
    indices: &[usize],
) -> Result<(f64, Array3<f64>)> {
    check_alignment_inputs(h, m_h, indices)?;
    let (heads, p, n) = m_h.dim();
    let mut grad = Array3::<f64>::zeros((heads, p, n));
    let norms_h: Vec<f64> = h
        .outer_iter()
        .map(|row| row.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    if let Some(k) = norms_h.iter().position(|&v| !(v > 0.0)) {
        return Err(HcpError::Degenerate(format!("prior channel {k} has zero norm")));
    }
    let weight = 1.0 / (indices.len() * heads) as f64;
    let mut loss = 0.0;
    for &i in indices {
        let mut mean_cos = 0.0;
        for k in 0..heads {
            let a = h.row(k);
            let mut ab = 0.0;
            let mut bb = 0.0;
            for pos in 0..p {
                let b = m_h[[k, pos, i]];
                ab += a[pos] * b;
                bb += b * b;
            }
            let nb = bb.sqrt();
            if !(nb > 0.0) {
                return Err(HcpError::Degenerate(format!(
                    "attention column for token {i}, head {k} has zero norm"
                )));
            }
            let na = norms_h[k];
            let cos = ab / (na * nb);
            mean_cos += cos / heads as f64;
            // ∂cos/∂b = a/(|a||b|) − cos·b/|b|²
            for pos in 0..p {
                let b = m_h[[k, pos, i]];
                let dcos = a[pos] / (na * nb) - cos * b / bb;
                grad[[k, pos, i]] -= weight * dcos;
            }
        }
        loss += 1.0 - mean_cos;
    }
    Ok((loss / indices.len() as f64, grad))
}

pub fn alignment_loss(h: ArrayView2<f64>, m_h: ArrayView3<f64>, indices: &[usize]) -> Result<f64> {
    alignment_loss_with_grad(h, m_h, indices).map(|(l, _)| l)
}

/// Mean squared error over all elements.
pub fn denoising_loss(eps: ArrayViewD<f64>, pred: ArrayViewD<f64>) -> Result<f64> {
    if eps.shape() != pred.shape() {
        return Err(HcpError::shape("denoising_loss", eps.shape(), pred.shape()));
    }
    if eps.is_empty() {
        return Err(HcpError::Validation("denoising loss of an empty array".into()));
    }
    let sum: f64 = eps.iter().zip(pred.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sum / eps.len() as f64)
}

/// Gradient of [`denoising_loss`] with respect to the prediction.
pub fn denoising_loss_grad(eps: ArrayViewD<f64>, pred: ArrayViewD<f64>) -> Result<ArrayD<f64>> {
    if eps.shape() != pred.shape() {
        return Err(HcpError::shape("denoising_loss", eps.shape(), pred.shape()));
    }
    let scale = 2.0 / eps.len() as f64;
    Ok((&pred - &eps) * scale)
}

/// Loss terms of one step, recomputable from its parts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub step: u64,
    pub timestep: u32,
    pub l_hca_per_layer: BTreeMap<LayerId, f64>,
    pub lambda_per_layer: BTreeMap<LayerId, f64>,
    pub l_ldm: f64,
    pub total: f64,
    pub alpha: f64,
    pub gamma: f64,
}

impl LossBreakdown {
    pub fn recompute_total(&self) -> f64 {
        let weighted: f64 = self
            .l_hca_per_layer
            .iter()
            .map(|(l, v)| self.lambda_per_layer.get(l).copied().unwrap_or(f64::NAN) * v)
            .sum();
        self.alpha * weighted + self.l_ldm
    }

    pub fn mean_l_hca(&self) -> f64 {
        if self.l_hca_per_layer.is_empty() {
            return 0.0;
        }
        self.l_hca_per_layer.values().sum::<f64>() / self.l_hca_per_layer.len() as f64
    }
}

pub fn total_loss(
    l_hca: &BTreeMap<LayerId, f64>,
    l_ldm: f64,
    t: u32,
    alpha: f64,
    gamma: f64,
    schedule: &WeightSchedule,
) -> Result<LossBreakdown> {
    if !(alpha >= 0.0) {
        return Err(HcpError::Validation(format!("alpha must be non-negative, got {alpha}")));
    }
    let mut lambdas = BTreeMap::new();
    let mut weighted = 0.0;
    for (layer, &v) in l_hca {
        let lambda = schedule.lambda(layer, t)?;
        weighted += lambda * v;
        lambdas.insert(layer.clone(), lambda);
    }
    Ok(LossBreakdown {
        step: 0,
        timestep: t,
        l_hca_per_layer: l_hca.clone(),
        lambda_per_layer: lambdas,
        l_ldm,
        total: alpha * weighted + l_ldm,
        alpha,
        gamma,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2, IxDyn};

    fn partition() -> StagePartition {
        StagePartition::new(vec![
            ("d0".into(), Stage::Down),
            ("m0".into(), Stage::Mid),
            ("u0".into(), Stage::Up),
        ])
        .unwrap()
    }

    fn schedule() -> WeightSchedule {
        WeightSchedule::new(1000, partition()).unwrap()
    }

    #[test]
    fn lambda_boundary_values() {
        let s = schedule();
        let l = |id: &str, t| s.lambda(&id.into(), t).unwrap();
        assert_eq!(l("d0", 0), 1.0);
        assert!(l("d0", 1000).abs() < 1e-15);
        assert_eq!(l("m0", 1000), 1.0);
        assert!(l("m0", 0).abs() < 1e-15);
        assert_eq!(l("u0", 500), 1.0);
        assert!(l("u0", 0).abs() < 1e-15);
        assert!(l("u0", 1000).abs() < 1e-15);
        assert!((l("d0", 500) - 0.7071067811865476).abs() < 1e-15);
    }

    #[test]
    fn lambda_errors() {
        let s = schedule();
        assert!(s.lambda(&"d0".into(), 1001).is_err());
        assert!(s.lambda(&"zz".into(), 10).is_err());
    }

    #[test]
    fn disabled_stage_uses_constant_one() {
        let s = schedule().with_toggles(StageToggles { down: true, mid: false, up: true });
        assert_eq!(s.lambda(&"m0".into(), 0).unwrap(), 1.0);
        assert!(s.lambda(&"d0".into(), 1000).unwrap() < 1e-15);
    }

    #[test]
    fn partition_rejects_out_of_order_stages() {
        assert!(StagePartition::new(vec![("a".into(), Stage::Mid), ("b".into(), Stage::Down)]).is_err());
        assert!(StagePartition::new(vec![("a".into(), Stage::Mid), ("a".into(), Stage::Up)]).is_err());
    }

    fn maps_from_columns(cols: &[Array2<f64>]) -> Array3<f64> {
        // cols[i] is [heads, P] for token i
        let (heads, p) = cols[0].dim();
        Array3::from_shape_fn((heads, p, cols.len()), |(k, pos, i)| cols[i][[k, pos]])
    }

    #[test]
    fn identical_and_scaled_columns_give_zero() {
        let h = array![[1.0, 2.0, 0.5], [0.0, 1.0, 3.0]];
        let m = maps_from_columns(&[h.clone(), h.mapv(|v| v * 4.0)]);
        assert!(alignment_loss(h.view(), m.view(), &[0, 1]).unwrap().abs() < 1e-15);
    }

    #[test]
    fn orthogonal_columns_give_one_and_mixture_gives_half() {
        let h = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let orth = array![[0.0, 1.0, 1.0], [1.0, 0.0, 1.0]];
        let m = maps_from_columns(&[h.clone(), orth.clone()]);
        assert!((alignment_loss(h.view(), m.view(), &[1]).unwrap() - 1.0).abs() < 1e-15);
        assert!((alignment_loss(h.view(), m.view(), &[0, 1]).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn alignment_errors() {
        let h = array![[1.0, 0.0], [0.0, 1.0]];
        let m = Array3::from_elem((2, 2, 3), 0.5);
        assert!(matches!(alignment_loss(h.view(), m.view(), &[]), Err(HcpError::Validation(_))));
        assert!(matches!(alignment_loss(h.view(), m.view(), &[3]), Err(HcpError::Validation(_))));
        let zero_h = Array2::<f64>::zeros((2, 2));
        assert!(matches!(alignment_loss(zero_h.view(), m.view(), &[0]), Err(HcpError::Degenerate(_))));
        let mut zero_col = m.clone();
        zero_col.slice_mut(ndarray::s![1, .., 2]).fill(0.0);
        assert!(matches!(alignment_loss(h.view(), zero_col.view(), &[2]), Err(HcpError::Degenerate(_))));
        assert!(alignment_loss(h.view(), zero_col.view(), &[0]).is_ok());
        let wrong = Array3::from_elem((3, 2, 3), 0.5);
        assert!(matches!(alignment_loss(h.view(), wrong.view(), &[0]), Err(HcpError::Shape { .. })));
    }

    #[test]
    fn mse_cases() {
        let e = ArrayD::from_shape_vec(IxDyn(&[2, 3]), vec![0.1, -0.2, 0.3, 1.0, 2.0, -1.0]).unwrap();
        assert_eq!(denoising_loss(e.view(), e.view()).unwrap(), 0.0);
        let shifted = e.mapv(|v| v + 1.0);
        assert!((denoising_loss(e.view(), shifted.view()).unwrap() - 1.0).abs() < 1e-15);
        let other = ArrayD::from_shape_vec(IxDyn(&[2, 3]), vec![0.0, 0.0, 1.0, 1.0, 0.5, 0.0]).unwrap();
        let oracle = [0.01, 0.04, 0.49, 0.0, 2.25, 1.0].iter().sum::<f64>() / 6.0;
        assert!((denoising_loss(e.view(), other.view()).unwrap() - oracle).abs() < 1e-15);
        let bad = ArrayD::<f64>::zeros(IxDyn(&[3, 2]));
        assert!(denoising_loss(e.view(), bad.view()).is_err());
    }

    #[test]
    fn total_loss_examples() {
        let part = StagePartition::new(vec![("a".into(), Stage::Down), ("b".into(), Stage::Up)]).unwrap();
        let s = WeightSchedule::new(1000, part).unwrap();
        let mut l = BTreeMap::new();
        l.insert(LayerId::from("a"), 0.4);
        l.insert(LayerId::from("b"), 0.2);
        // t=0: λ_down = 1; λ_up = cos(-π/2) = 0
        let off = total_loss(&l, 0.3, 0, 0.0, 0.9, &s).unwrap();
        assert_eq!(off.total, 0.3);
        // down at t = T contributes nothing
        let r = total_loss(&l, 0.3, 1000, 0.1, 0.9, &s).unwrap();
        assert!(r.lambda_per_layer[&LayerId::from("a")] < 1e-15);
        assert!((r.total - r.recompute_total()).abs() < 1e-15);
    }

    #[test]
    fn total_loss_scalar_fixture() {
        // λ = (1, 0.5): down layer with its cosine disabled → 1;
        // up layer at T = 6, t = 1 → cos((2−6)/6·π/2) = cos(π/3) = 0.5
        let part = StagePartition::new(vec![("a".into(), Stage::Down), ("b".into(), Stage::Up)]).unwrap();
        let s = WeightSchedule::new(6, part).unwrap();
        let s = s.with_toggles(StageToggles { down: false, mid: true, up: true });
        let mut l = BTreeMap::new();
        l.insert(LayerId::from("a"), 0.4);
        l.insert(LayerId::from("b"), 0.2);
        let r = total_loss(&l, 0.3, 1, 0.1, 0.9, &s).unwrap();
        assert_eq!(r.lambda_per_layer[&LayerId::from("a")], 1.0);
        assert!((r.lambda_per_layer[&LayerId::from("b")] - 0.5).abs() < 1e-15);
        assert!((r.total - 0.35).abs() < 1e-12);
        assert!((r.recompute_total() - r.total).abs() < 1e-15);
    }
}
