//! DDIM sampling with classifier-free guidance over a hooked backbone.

use std::collections::BTreeMap;

use ndarray::{Array3, ArrayView3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionMaps;
use crate::backbone::{BackboneDescriptor, Denoiser, HcpHook, HookSet, HookedBackbone, NoiseSchedule, ToyLatentCodec};
use crate::checkpoint::Checkpoint;
use crate::error::{CompatibilityReport, HcpError, Result};
use crate::imageio::{encode_png, to_u8};
use crate::objectives::LayerId;
use crate::tokens::PromptPipeline;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub steps: u32,
    pub guidance_scale: f64,
    pub eta: f64,
    pub seed: u64,
    /// Inference `γ`; the checkpoint's training value when unset.
    pub gamma: Option<f64>,
    pub t_max: u32,
    pub unconditional_prompt: String,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            guidance_scale: 7.5,
            eta: 0.0,
            seed: 0,
            gamma: None,
            t_max: 1000,
            unconditional_prompt: String::new(),
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.steps > self.t_max {
            return Err(HcpError::Validation(format!(
                "steps must lie in [1, {}], got {}",
                self.t_max, self.steps
            )));
        }
        if !(self.guidance_scale >= 0.0) {
            return Err(HcpError::Validation("guidance_scale must be ≥ 0".into()));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(HcpError::Validation("eta must lie in [0, 1]".into()));
        }
        if let Some(g) = self.gamma {
            if !(0.0..=1.0).contains(&g) {
                return Err(HcpError::Validation("gamma must lie in [0, 1]".into()));
            }
        }
        Ok(())
    }
}

/// `(t, t_prev)` pairs with uniform spacing, from `T` down to a final
/// target of 0.
pub fn ddim_timesteps(t_max: u32, steps: u32) -> Result<Vec<(u32, u32)>> {
    if steps == 0 || steps > t_max {
        return Err(HcpError::Validation(format!(
            "cannot place {steps} steps in {t_max} timesteps"
        )));
    }
    let at = |i: u32| (i as u64 * t_max as u64 / steps as u64) as u32;
    Ok((1..=steps).rev().map(|i| (at(i), at(i - 1))).collect())
}

/// One DDIM update from `t` to `t_prev`. Noise is drawn only when `σ > 0`.
pub fn ddim_step<R: Rng + ?Sized>(
    z_t: ArrayView3<f64>,
    eps: ArrayView3<f64>,
    t: u32,
    t_prev: u32,
    schedule: &NoiseSchedule,
    eta: f64,
    rng: &mut R,
) -> Result<Array3<f64>> {
    if t <= t_prev {
        return Err(HcpError::Validation(format!(
            "DDIM step needs t > t_prev, got {t} → {t_prev}"
        )));
    }
    if z_t.shape() != eps.shape() {
        return Err(HcpError::shape("ddim_step", z_t.shape(), eps.shape()));
    }
    let a_t = schedule.alpha_bar(t)?;
    let a_p = schedule.alpha_bar(t_prev)?;
    let sigma = eta * ((1.0 - a_p) / (1.0 - a_t)).sqrt() * (1.0 - a_t / a_p).sqrt();
    let dir = (1.0 - a_p - sigma * sigma).max(0.0).sqrt();
    let mut out = Array3::<f64>::zeros(z_t.raw_dim());
    ndarray::Zip::from(&mut out)
        .and(z_t)
        .and(eps)
        .for_each(|o, &z, &e| {
            let x0 = (z - (1.0 - a_t).sqrt() * e) / a_t.sqrt();
            *o = a_p.sqrt() * x0 + dir * e;
        });
    if sigma > 0.0 {
        for o in out.iter_mut() {
            let n: f64 = rng.sample(StandardNormal);
            *o += sigma * n;
        }
    }
    Ok(out)
}

/// Classifier-free guidance: `ε̂_u + w·(ε̂_c − ε̂_u)`.
pub fn guided_epsilon(cond: ArrayView3<f64>, uncond: ArrayView3<f64>, w: f64) -> Result<Array3<f64>> {
    if cond.shape() != uncond.shape() {
        return Err(HcpError::shape("guided_epsilon", cond.shape(), uncond.shape()));
    }
    let mut out = uncond.to_owned();
    ndarray::Zip::from(&mut out)
        .and(cond)
        .for_each(|u, &c| *u += w * (c - *u));
    Ok(out)
}

/// Layer-table differences between a checkpoint and a target backbone.
/// `aliases` maps checkpoint layer ids to target ids.
pub fn compatibility_report(
    source: &BackboneDescriptor,
    target: &BackboneDescriptor,
    aliases: &BTreeMap<LayerId, LayerId>,
) -> CompatibilityReport {
    let mut report = CompatibilityReport::default();
    if source.embed_dim != target.embed_dim {
        report.push(
            "*",
            format!("text embedding width {} vs {}", source.embed_dim, target.embed_dim),
        );
    }
    let mut covered = Vec::new();
    for l in &source.layers {
        let id = aliases.get(&l.id).unwrap_or(&l.id);
        let Some(t) = target.layer(id) else {
            report.push(id.as_str(), "no such layer in target backbone");
            continue;
        };
        covered.push(id.clone());
        let mut diff = Vec::new();
        if l.stage != t.stage {
            diff.push(format!("stage {} vs {}", l.stage, t.stage));
        }
        if l.side != t.side {
            diff.push(format!("side {} vs {}", l.side, t.side));
        }
        if l.head_count != t.head_count {
            diff.push(format!("heads {} vs {}", l.head_count, t.head_count));
        }
        if l.key_dim != t.key_dim {
            diff.push(format!("key width {} vs {}", l.key_dim, t.key_dim));
        }
        if l.token_capacity != t.token_capacity {
            diff.push(format!("tokens {} vs {}", l.token_capacity, t.token_capacity));
        }
        if !diff.is_empty() {
            report.push(id.as_str(), diff.join(", "));
        }
    }
    for t in &target.layers {
        if !covered.contains(&t.id) {
            report.push(t.id.as_str(), "target layer has no HcP parameters in checkpoint");
        }
    }
    report
}

/// Routes every cross-attention site of `backbone` through the checkpoint's
/// HcP layers.
pub fn attach_hcp<B: Denoiser>(
    backbone: B,
    checkpoint: &Checkpoint,
    gamma: Option<f64>,
    aliases: &BTreeMap<LayerId, LayerId>,
) -> Result<HookedBackbone<B>> {
    let report = compatibility_report(&checkpoint.descriptor, backbone.descriptor(), aliases);
    if !report.is_empty() {
        return Err(HcpError::Compatibility(report));
    }
    let gamma = gamma.unwrap_or(checkpoint.gamma);
    if !(0.0..=1.0).contains(&gamma) {
        return Err(HcpError::Validation(format!("gamma must lie in [0, 1], got {gamma}")));
    }
    let mut hooks = HookSet::new();
    for (id, params) in &checkpoint.layers {
        let target = aliases.get(id).unwrap_or(id).clone();
        hooks.attach(target, HcpHook { params: params.clone(), gamma });
    }
    HookedBackbone::with_hooks(backbone, hooks)
}

/// Receives the conditional branch's maps at every denoising step.
pub trait MapObserver {
    fn observe(&mut self, t: u32, maps: &[(LayerId, AttentionMaps)]) -> Result<()>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedSample {
    pub latent: Array3<f64>,
    /// `[h, w, 3]` in `[0, 1]`.
    pub image: Array3<f64>,
}

impl GeneratedSample {
    pub fn png_bytes(&self) -> Result<Vec<u8>> {
        let (h, w, _) = self.image.dim();
        let px: Vec<u8> = self.image.iter().map(|&v| to_u8(v)).collect();
        encode_png(w as u32, h as u32, 3, &px)
    }
}

/// Text-only generation: no prior image or prior feature is consulted.
pub fn generate<B: Denoiser>(
    prompt: &str,
    pipeline: &PromptPipeline,
    config: &SamplerConfig,
    model: &HookedBackbone<B>,
    codec: &ToyLatentCodec,
    mut observer: Option<&mut dyn MapObserver>,
) -> Result<GeneratedSample> {
    config.validate()?;
    let cond = pipeline.encode(prompt)?;
    let uncond = pipeline.encode(&config.unconditional_prompt)?;
    let schedule = NoiseSchedule::ddpm_default(config.t_max)?;
    let desc = model.base().descriptor();
    let shape = (desc.latent_channels, desc.latent_side, desc.latent_side);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut z = Array3::from_shape_simple_fn(shape, || rng.sample(StandardNormal));
    for (t, t_prev) in ddim_timesteps(config.t_max, config.steps)? {
        let c = model.denoise(z.view(), t, cond.embeddings.view())?;
        if let Some(obs) = observer.as_deref_mut() {
            obs.observe(t, &c.maps)?;
        }
        let eps = if config.guidance_scale == 1.0 {
            c.eps
        } else {
            let u = model.denoise(z.view(), t, uncond.embeddings.view())?;
            guided_epsilon(c.eps.view(), u.eps.view(), config.guidance_scale)?
        };
        z = ddim_step(z.view(), eps.view(), t, t_prev, &schedule, config.eta, &mut rng)?;
        if z.iter().any(|v| !v.is_finite()) {
            return Err(HcpError::Numerical(format!("non-finite latent after step t = {t}")));
        }
    }
    let image = codec.decode(z.view())?;
    Ok(GeneratedSample { latent: z, image })
}

/// Tiles equally sized `[h, w, 3]` images row-major into `cols` columns.
pub fn image_grid(images: &[Array3<f64>], cols: usize) -> Result<Array3<f64>> {
    let first = images
        .first()
        .ok_or_else(|| HcpError::Validation("image grid needs at least one image".into()))?;
    let (h, w, c) = first.dim();
    if cols == 0 {
        return Err(HcpError::Validation("image grid needs at least one column".into()));
    }
    let rows = images.len().div_ceil(cols);
    let mut out = Array3::<f64>::zeros((rows * h, cols * w, c));
    for (k, img) in images.iter().enumerate() {
        if img.dim() != (h, w, c) {
            return Err(HcpError::shape("image grid", img.shape(), first.shape()));
        }
        let (r, col) = (k / cols, k % cols);
        out.slice_mut(ndarray::s![r * h..(r + 1) * h, col * w..(col + 1) * w, ..])
            .assign(img);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::HcpLayerParams;
    use crate::backbone::ToyBackbone;

    fn schedule() -> NoiseSchedule {
        NoiseSchedule::ddpm_default(1000).unwrap()
    }

    #[test]
    fn timesteps_are_uniform_and_end_at_zero() {
        let ts = ddim_timesteps(1000, 50).unwrap();
        assert_eq!(ts.len(), 50);
        assert_eq!(ts[0], (1000, 980));
        assert_eq!(ts[49], (20, 0));
        assert!(ddim_timesteps(10, 11).is_err());
        let odd = ddim_timesteps(10, 3).unwrap();
        assert_eq!(odd, vec![(10, 6), (6, 3), (3, 0)]);
    }

    #[test]
    fn zero_epsilon_step_scales_latent() {
        let s = schedule();
        let z = Array3::from_shape_fn((2, 3, 3), |(c, y, x)| c as f64 - 0.3 * y as f64 + 0.7 * x as f64);
        let eps = Array3::zeros((2, 3, 3));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = ddim_step(z.view(), eps.view(), 700, 650, &s, 0.0, &mut rng).unwrap();
        let k = (s.alpha_bar(650).unwrap() / s.alpha_bar(700).unwrap()).sqrt();
        for (o, zi) in out.iter().zip(z.iter()) {
            assert!((o - k * zi).abs() < 1e-12);
        }
    }

    #[test]
    fn exact_epsilon_recovers_clean_latent() {
        let s = schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z0 = Array3::from_shape_simple_fn((4, 4, 4), || rng.sample::<f64, _>(StandardNormal));
        let eps = Array3::from_shape_simple_fn((4, 4, 4), || rng.sample::<f64, _>(StandardNormal));
        let z_t = crate::backbone::forward_noise(z0.view(), 600, eps.view(), &s).unwrap();
        let back = ddim_step(z_t.view(), eps.view(), 600, 0, &s, 0.0, &mut rng).unwrap();
        assert!((&back - &z0).iter().all(|v| v.abs() < 1e-5));
    }

    #[test]
    fn step_rejects_non_monotone_pair() {
        let z = Array3::zeros((1, 1, 1));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(ddim_step(z.view(), z.view(), 5, 5, &schedule(), 0.0, &mut rng).is_err());
        assert!(ddim_step(z.view(), z.view(), 5, 9, &schedule(), 0.0, &mut rng).is_err());
    }

    #[test]
    fn stochastic_step_uses_sigma() {
        let s = schedule();
        let z = Array3::from_elem((1, 2, 2), 0.5);
        let e = Array3::from_elem((1, 2, 2), 0.1);
        let a = ddim_step(z.view(), e.view(), 500, 400, &s, 1.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = ddim_step(z.view(), e.view(), 500, 400, &s, 1.0, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn guidance_cases() {
        let c = Array3::from_elem((1, 1, 1), 2.0);
        let u = Array3::from_elem((1, 1, 1), 1.0);
        assert_eq!(guided_epsilon(c.view(), u.view(), 0.0).unwrap(), u);
        assert_eq!(guided_epsilon(c.view(), u.view(), 1.0).unwrap(), c);
        assert_eq!(guided_epsilon(c.view(), u.view(), 7.5).unwrap()[[0, 0, 0]], 8.5);
        assert!(guided_epsilon(c.view(), Array3::zeros((1, 1, 2)).view(), 1.0).is_err());
    }

    fn checkpoint_for(desc: &BackboneDescriptor) -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        Checkpoint {
            step: 0,
            descriptor_hash: desc.hash(),
            descriptor: desc.clone(),
            config: Default::default(),
            gamma: 0.9,
            layers: desc
                .layers
                .iter()
                .map(|l| (l.id.clone(), HcpLayerParams::new(&mut rng, desc.embed_dim, 16, l.key_dim, 1.0).unwrap()))
                .collect(),
            optimizer: None,
        }
    }

    fn quick() -> SamplerConfig {
        SamplerConfig { steps: 5, ..SamplerConfig::default() }
    }

    #[test]
    fn attach_detach_and_gating_identity() {
        let desc = BackboneDescriptor::minimal(32, 16);
        let b = ToyBackbone::new(desc.clone(), 32, 1).unwrap();
        let pipe = PromptPipeline::toy(2, 16, 32);
        let codec = ToyLatentCodec { latent_side: 16, image_side: 32 };
        let ckpt = checkpoint_for(&desc);
        let plain = HookedBackbone::unhooked(b.clone());
        let base = generate("a woman doing yoga", &pipe, &quick(), &plain, &codec, None).unwrap();
        let gated = attach_hcp(b.clone(), &ckpt, Some(1.0), &BTreeMap::new()).unwrap();
        assert_eq!(generate("a woman doing yoga", &pipe, &quick(), &gated, &codec, None).unwrap(), base);
        let hooked = attach_hcp(b.clone(), &ckpt, None, &BTreeMap::new()).unwrap();
        let with = generate("a woman doing yoga", &pipe, &quick(), &hooked, &codec, None).unwrap();
        assert_ne!(with, base);
        let again = generate("a woman doing yoga", &pipe, &quick(), &hooked, &codec, None).unwrap();
        assert_eq!(with, again);
        let detached = HookedBackbone::unhooked(hooked.detach());
        assert_eq!(generate("a woman doing yoga", &pipe, &quick(), &detached, &codec, None).unwrap(), base);
    }

    #[test]
    fn incompatible_checkpoint_reports_layers() {
        let desc = BackboneDescriptor::minimal(32, 16);
        let mut other = desc.clone();
        other.layers[1].head_count = 4;
        other.layers[3].id = LayerId::from("up.9");
        let b = ToyBackbone::new(other, 32, 1).unwrap();
        match attach_hcp(b.clone(), &checkpoint_for(&desc), None, &BTreeMap::new()) {
            Err(HcpError::Compatibility(r)) => {
                let names: Vec<_> = r.mismatches.iter().map(|m| m.layer.as_str()).collect();
                assert_eq!(names, vec!["mid.0", "up.1", "up.9"]);
            }
            other => panic!("{other:?}"),
        }
        let mut aliases = BTreeMap::new();
        aliases.insert(LayerId::from("up.1"), LayerId::from("up.9"));
        let err = attach_hcp(b, &checkpoint_for(&desc), None, &aliases).unwrap_err();
        assert!(err.to_string().contains("mid.0"));
    }

    #[test]
    fn grid_tiles_images() {
        let a = Array3::from_elem((2, 2, 3), 0.0);
        let b = Array3::from_elem((2, 2, 3), 1.0);
        let g = image_grid(&[a, b.clone(), b], 2).unwrap();
        assert_eq!(g.dim(), (4, 4, 3));
        assert_eq!(g[[0, 0, 0]], 0.0);
        assert_eq!(g[[0, 3, 0]], 1.0);
        assert_eq!(g[[3, 3, 0]], 0.0);
    }
}
