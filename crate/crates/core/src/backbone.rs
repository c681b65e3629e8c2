//! Denoiser interface with hookable cross-attention sites, the DDPM forward
//! process, and a small deterministic toy denoiser.
//!
//! Real pretrained denoisers attach through the same [`BackboneDescriptor`]
//! and [`CrossAttentionHook`] contract; only the toy backbone ships here.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Array3, ArrayView2, ArrayView3, ArrayViewD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::{
    cross_attention, hcp_cross_attention_traced, AttentionMaps, AttentionWeights,
    CrossAttentionConfig, HcpAttentionForward, HcpLayerParams,
};
use crate::error::{HcpError, Result};
use crate::objectives::{LayerId, Stage, StagePartition};
use crate::prior::PRIOR_SCALES;
use crate::tensor::{add_upsampled_rows, avg_pool_rows, matmul, matmul_bt, normal_matrix, sum_pool_rows};

/// One cross-attention site, in forward execution order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub id: LayerId,
    pub stage: Stage,
    /// Spatial side of the layer's latent grid; `P = side²`.
    pub side: usize,
    pub head_count: usize,
    /// Query/key width `d`.
    pub key_dim: usize,
    /// Text tokens `N` the site attends over.
    pub token_capacity: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneDescriptor {
    pub layers: Vec<LayerSpec>,
    pub latent_channels: usize,
    pub latent_side: usize,
    /// Text embedding width `D`.
    pub embed_dim: usize,
}

impl BackboneDescriptor {
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(HcpError::Validation("descriptor has no layers".into()));
        }
        if self.latent_channels == 0 || self.latent_side == 0 || self.embed_dim == 0 {
            return Err(HcpError::Validation(
                "latent shape and embedding width must be positive".into(),
            ));
        }
        for l in &self.layers {
            if !PRIOR_SCALES.contains(&l.side) {
                return Err(HcpError::Validation(format!(
                    "layer `{}` has side {}, expected one of {PRIOR_SCALES:?}",
                    l.id, l.side
                )));
            }
            if self.latent_side % l.side != 0 {
                return Err(HcpError::Validation(format!(
                    "layer `{}` side {} does not divide latent side {}",
                    l.id, l.side, self.latent_side
                )));
            }
            self.attention_config(l).validate()?;
        }
        self.partition()?;
        Ok(())
    }

    pub fn partition(&self) -> Result<StagePartition> {
        StagePartition::new(self.layers.iter().map(|l| (l.id.clone(), l.stage)).collect())
    }

    pub fn layer(&self, id: &LayerId) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| &l.id == id)
    }

    pub fn attention_config(&self, layer: &LayerSpec) -> CrossAttentionConfig {
        CrossAttentionConfig {
            latent_dim: layer.key_dim,
            head_count: layer.head_count,
            token_count: layer.token_capacity,
            embed_dim: self.embed_dim,
            query_len: layer.side * layer.side,
        }
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("descriptor serialises");
        hex::encode(Sha256::digest(&bytes))
    }

    /// Four layers over two scales: down@16², mid@8², up@8², up@16².
    pub fn minimal(embed_dim: usize, token_capacity: usize) -> Self {
        let layer = |id: &str, stage, side| LayerSpec {
            id: LayerId::from(id),
            stage,
            side,
            head_count: 8,
            key_dim: 64,
            token_capacity,
        };
        Self {
            layers: vec![
                layer("down.0", Stage::Down, 16),
                layer("mid.0", Stage::Mid, 8),
                layer("up.0", Stage::Up, 8),
                layer("up.1", Stage::Up, 16),
            ],
            latent_channels: 4,
            latent_side: 16,
            embed_dim,
        }
    }
}

/// DDPM variance schedule. `alpha_bar(0) = 1` (clean data) and
/// `alpha_bar(t) = Π_{s<t} (1 − β_s)` for `t = 1..=T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub t_max: u32,
    pub betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub const DEFAULT_BETA_START: f64 = 1e-4;
    pub const DEFAULT_BETA_END: f64 = 0.02;

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(HcpError::Validation("noise schedule needs T ≥ 1".into()));
        }
        if betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(HcpError::Validation("betas must lie in (0, 1)".into()));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        let mut acc = 1.0;
        alpha_bars.push(acc);
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self {
            t_max: betas.len() as u32,
            betas,
            alpha_bars,
        })
    }

    pub fn linear(t_max: u32, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_max == 0 {
            return Err(HcpError::Validation("noise schedule needs T ≥ 1".into()));
        }
        let n = t_max as usize;
        let betas = (0..n)
            .map(|i| {
                if n == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (n - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn ddpm_default(t_max: u32) -> Result<Self> {
        Self::linear(t_max, Self::DEFAULT_BETA_START, Self::DEFAULT_BETA_END)
    }

    pub fn alpha_bar(&self, t: u32) -> Result<f64> {
        self.alpha_bars.get(t as usize).copied().ok_or_else(|| {
            HcpError::Validation(format!("timestep {t} outside [0, {}]", self.t_max))
        })
    }
}

/// `z_t = √ᾱ·z_0 + √(1−ᾱ)·ε` for an explicit `ᾱ`.
pub fn noise_with_alpha_bar(z0: ArrayView3<f64>, eps: ArrayView3<f64>, alpha_bar: f64) -> Result<Array3<f64>> {
    if z0.shape() != eps.shape() {
        return Err(HcpError::shape("forward_noise: z_0 vs ε", z0.shape(), eps.shape()));
    }
    let a = alpha_bar.sqrt();
    let b = (1.0 - alpha_bar).sqrt();
    let mut out = z0.to_owned();
    ndarray::Zip::from(&mut out)
        .and(eps)
        .for_each(|z, &e| *z = a * *z + b * e);
    Ok(out)
}

pub fn forward_noise(
    z0: ArrayView3<f64>,
    t: u32,
    eps: ArrayView3<f64>,
    schedule: &NoiseSchedule,
) -> Result<Array3<f64>> {
    noise_with_alpha_bar(z0, eps, schedule.alpha_bar(t)?)
}

/// Identity-style codec between RGB images `[h, w, 3]` in `[0, 1]` and toy
/// latents `[4, side, side]`: three colour planes in `[-1, 1]` plus luminance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyLatentCodec {
    pub latent_side: usize,
    pub image_side: usize,
}

impl ToyLatentCodec {
    pub const CHANNELS: usize = 4;

    pub fn encode(&self, image: ArrayView3<f64>) -> Result<Array3<f64>> {
        let (_, _, c) = image.dim();
        if c != 3 {
            return Err(HcpError::shape("codec: image channels", image.shape(), &[3]));
        }
        let chw = image.permuted_axes([2, 0, 1]);
        let small = crate::tensor::resize_bilinear(chw, (self.latent_side, self.latent_side))?;
        let s = self.latent_side;
        Ok(Array3::from_shape_fn((Self::CHANNELS, s, s), |(ch, y, x)| {
            let v = if ch < 3 {
                small[[ch, y, x]]
            } else {
                0.299 * small[[0, y, x]] + 0.587 * small[[1, y, x]] + 0.114 * small[[2, y, x]]
            };
            2.0 * v - 1.0
        }))
    }

    /// RGB image `[image_side, image_side, 3]` in `[0, 1]`, nearest upsampling.
    pub fn decode(&self, latent: ArrayView3<f64>) -> Result<Array3<f64>> {
        let s = self.latent_side;
        if latent.dim() != (Self::CHANNELS, s, s) {
            return Err(HcpError::shape("codec: latent", latent.shape(), &[Self::CHANNELS, s, s]));
        }
        let n = self.image_side;
        Ok(Array3::from_shape_fn((n, n, 3), |(y, x, ch)| {
            let v = latent[[ch, y * s / n, x * s / n]];
            ((v + 1.0) / 2.0).clamp(0.0, 1.0)
        }))
    }
}

/// HcP parameters and combination weight attached at one site.
#[derive(Debug, Clone, PartialEq)]
pub struct HcpHook {
    pub params: HcpLayerParams,
    pub gamma: f64,
}

/// Callback invoked at a hooked cross-attention site with the layer, its
/// frozen projections, the query-input latent rows `[P, channels]` and the
/// text embeddings `[N, D]`. Returns the attention output `[P, d]` and maps.
pub trait CrossAttentionHook {
    fn attend(
        &self,
        layer: &LayerSpec,
        config: &CrossAttentionConfig,
        weights: &AttentionWeights,
        z_in: ArrayView2<f64>,
        context: ArrayView2<f64>,
    ) -> Result<(Array2<f64>, AttentionMaps)>;
}

impl CrossAttentionHook for HcpHook {
    fn attend(
        &self,
        _layer: &LayerSpec,
        config: &CrossAttentionConfig,
        weights: &AttentionWeights,
        z_in: ArrayView2<f64>,
        context: ArrayView2<f64>,
    ) -> Result<(Array2<f64>, AttentionMaps)> {
        let fwd = hcp_cross_attention_traced(z_in, context, weights, &self.params, self.gamma, config)?;
        Ok((fwd.z_out, fwd.maps))
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct HookSet {
    hooks: BTreeMap<LayerId, HcpHook>,
}

impl HookSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn attach(&mut self, layer: LayerId, hook: HcpHook) -> Option<HcpHook> {
        self.hooks.insert(layer, hook)
    }

    pub fn detach(&mut self, layer: &LayerId) -> Option<HcpHook> {
        self.hooks.remove(layer)
    }

    pub fn get(&self, layer: &LayerId) -> Option<&HcpHook> {
        self.hooks.get(layer)
    }

    pub fn get_mut(&mut self, layer: &LayerId) -> Option<&mut HcpHook> {
        self.hooks.get_mut(layer)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&LayerId, &HcpHook)> {
        self.hooks.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&LayerId, &mut HcpHook)> {
        self.hooks.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.hooks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hooks.is_empty()
    }

    pub fn set_gamma(&mut self, gamma: f64) {
        for h in self.hooks.values_mut() {
            h.gamma = gamma;
        }
    }

    /// Fails with a configuration error if any hook names a layer the
    /// descriptor does not have.
    pub fn check_against(&self, descriptor: &BackboneDescriptor) -> Result<()> {
        for id in self.hooks.keys() {
            if descriptor.layer(id).is_none() {
                return Err(HcpError::Config(format!(
                    "hook references unknown layer `{id}`"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct DenoiseOutput {
    pub eps: Array3<f64>,
    /// Maps of every site in forward order. Unhooked sites report the base
    /// map in all three slots with `γ = 1`.
    pub maps: Vec<(LayerId, AttentionMaps)>,
}

/// Per-site record of a traced forward pass.
#[derive(Debug, Clone)]
pub enum SiteTrace {
    Base(AttentionMaps),
    Hooked(Box<HcpAttentionForward>),
}

impl SiteTrace {
    pub fn maps(&self) -> &AttentionMaps {
        match self {
            SiteTrace::Base(m) => m,
            SiteTrace::Hooked(f) => &f.maps,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TracedDenoise {
    pub eps: Array3<f64>,
    pub sites: Vec<(LayerId, SiteTrace)>,
}

pub trait Denoiser {
    fn descriptor(&self) -> &BackboneDescriptor;

    /// `ε̂ = ε_θ(z_t, t, C)` with HcP hooks applied where attached.
    fn denoise(
        &self,
        z_t: ArrayView3<f64>,
        t: u32,
        context: ArrayView2<f64>,
        hooks: &HookSet,
    ) -> Result<DenoiseOutput> {
        let traced = self.denoise_traced(z_t, t, context, hooks)?;
        Ok(DenoiseOutput {
            eps: traced.eps,
            maps: traced
                .sites
                .into_iter()
                .map(|(id, s)| match s {
                    SiteTrace::Base(m) => (id, m),
                    SiteTrace::Hooked(f) => (id, f.maps),
                })
                .collect(),
        })
    }

    /// Forward pass keeping what HcP backpropagation needs.
    fn denoise_traced(
        &self,
        z_t: ArrayView3<f64>,
        t: u32,
        context: ArrayView2<f64>,
        hooks: &HookSet,
    ) -> Result<TracedDenoise>;

    /// `∂L/∂z_out` at every hooked site given `∂L/∂ε̂`.
    fn site_output_grads(
        &self,
        traced: &TracedDenoise,
        d_eps: ArrayView3<f64>,
    ) -> Result<BTreeMap<LayerId, Array2<f64>>>;

    /// Every frozen parameter block, by stable name.
    fn named_parameters(&self) -> Vec<(String, ArrayViewD<'_, f64>)>;
}

/// Frozen weights of one toy cross-attention branch.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyLayer {
    pub spec: LayerSpec,
    /// `[latent_channels, model_channels]`
    pub w_in: Array2<f64>,
    /// `[P, model_channels]` low-frequency positional features.
    pub pos: Array2<f64>,
    /// `[time_dim, model_channels]`
    pub w_t: Array2<f64>,
    pub attn: AttentionWeights,
    /// `[d, latent_channels]`
    pub w_o: Array2<f64>,
}

/// Desk-scale denoiser:
/// `ε̂ = z·W_skip + Σ_l up_l(attn_l(pool_l(z)·W_in + pos + temb(t)·W_t, C)·W_o)`,
/// where `pool_l`/`up_l` move between the latent grid and the layer's scale.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyBackbone {
    descriptor: BackboneDescriptor,
    pub layers: Vec<ToyLayer>,
    /// `[latent_channels, latent_channels]`
    pub w_skip: Array2<f64>,
    pub time_dim: usize,
    pub model_channels: usize,
    /// Optional external conditioning added to `z_t` before every branch.
    control: Option<Array3<f64>>,
    pub seed: u64,
}

pub fn timestep_embedding(t: u32, dim: usize) -> Array1<f64> {
    let half = dim / 2;
    let mut out = Array1::<f64>::zeros(dim);
    for j in 0..half {
        let freq = (-(10000f64.ln()) * j as f64 / half as f64).exp();
        let a = t as f64 * freq;
        out[j] = a.sin();
        out[half + j] = a.cos();
    }
    out
}

impl ToyBackbone {
    pub const DEFAULT_MODEL_CHANNELS: usize = 32;
    pub const TIME_DIM: usize = 16;

    fn check_spec(descriptor: &BackboneDescriptor, model_channels: usize) -> Result<()> {
        descriptor.validate()?;
        for stage in [Stage::Down, Stage::Mid, Stage::Up] {
            if !descriptor.layers.iter().any(|l| l.stage == stage) {
                return Err(HcpError::Validation(format!(
                    "toy backbone needs at least one {stage} layer"
                )));
            }
        }
        let mut sides: Vec<usize> = descriptor.layers.iter().map(|l| l.side).collect();
        sides.sort_unstable();
        sides.dedup();
        if sides.len() < 2 {
            return Err(HcpError::Validation(
                "toy backbone needs at least two distinct scales".into(),
            ));
        }
        if model_channels == 0 {
            return Err(HcpError::Validation("model_channels must be positive".into()));
        }
        Ok(())
    }

    pub fn new(descriptor: BackboneDescriptor, model_channels: usize, seed: u64) -> Result<Self> {
        Self::check_spec(&descriptor, model_channels)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c_lat = descriptor.latent_channels;
        let d_emb = descriptor.embed_dim;
        let time_dim = Self::TIME_DIM;
        let mut layers = Vec::with_capacity(descriptor.layers.len());
        for spec in &descriptor.layers {
            let d = spec.key_dim;
            let side = spec.side;
            let freqs: Vec<(f64, f64, f64)> = (0..model_channels)
                .map(|_| {
                    let kx = rng.random_range(0..=2) as f64;
                    let ky = rng.random_range(0..=2) as f64;
                    let phase = rng.random_range(0.0..std::f64::consts::TAU);
                    (kx, ky, phase)
                })
                .collect();
            let pos = Array2::from_shape_fn((side * side, model_channels), |(p, j)| {
                let (kx, ky, phase) = freqs[j];
                let x = ((p % side) as f64 + 0.5) / side as f64;
                let y = ((p / side) as f64 + 0.5) / side as f64;
                (std::f64::consts::TAU * (kx * x + ky * y) + phase).cos()
            });
            layers.push(ToyLayer {
                spec: spec.clone(),
                w_in: normal_matrix(&mut rng, c_lat, model_channels, 0.5 / (c_lat as f64).sqrt()),
                pos,
                w_t: normal_matrix(&mut rng, time_dim, model_channels, 0.5 / (time_dim as f64).sqrt()),
                attn: AttentionWeights {
                    w_q: normal_matrix(&mut rng, model_channels, d, 4.0 / (model_channels as f64).sqrt()),
                    w_k: normal_matrix(&mut rng, d_emb, d, 1.0 / (d_emb as f64).sqrt()),
                    w_v: normal_matrix(&mut rng, d_emb, d, 1.0 / (d_emb as f64).sqrt()),
                },
                w_o: normal_matrix(&mut rng, d, c_lat, 0.5 / (d as f64).sqrt()),
            });
        }
        let w_skip = normal_matrix(&mut rng, c_lat, c_lat, 0.5 / (c_lat as f64).sqrt());
        Ok(Self {
            descriptor,
            layers,
            w_skip,
            time_dim,
            model_channels,
            control: None,
            seed,
        })
    }

    /// Same architecture with every weight set to zero.
    pub fn zeros(descriptor: BackboneDescriptor, model_channels: usize) -> Result<Self> {
        let mut b = Self::new(descriptor, model_channels, 0)?;
        for l in &mut b.layers {
            l.w_in.fill(0.0);
            l.pos.fill(0.0);
            l.w_t.fill(0.0);
            l.attn.w_q.fill(0.0);
            l.attn.w_k.fill(0.0);
            l.attn.w_v.fill(0.0);
            l.w_o.fill(0.0);
        }
        b.w_skip.fill(0.0);
        Ok(b)
    }

    /// Adds an external conditioning latent to every input, standing in for
    /// a controllable pipeline with an extra input channel.
    pub fn with_control(mut self, control: Array3<f64>) -> Result<Self> {
        let expected = (
            self.descriptor.latent_channels,
            self.descriptor.latent_side,
            self.descriptor.latent_side,
        );
        if control.dim() != expected {
            return Err(HcpError::shape(
                "control latent",
                control.shape(),
                &[expected.0, expected.1, expected.2],
            ));
        }
        self.control = Some(control);
        Ok(self)
    }

    pub fn control(&self) -> Option<&Array3<f64>> {
        self.control.as_ref()
    }

    /// Mutable access to a parameter block by name, for adapters that load
    /// external weights.
    pub fn parameter_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        if name == "skip.w" {
            return Some(&mut self.w_skip);
        }
        let (layer, field) = name.rsplit_once('.')?;
        let l = self.layers.iter_mut().find(|l| l.spec.id.as_str() == layer)?;
        match field {
            "w_in" => Some(&mut l.w_in),
            "pos" => Some(&mut l.pos),
            "w_t" => Some(&mut l.w_t),
            "w_q" => Some(&mut l.attn.w_q),
            "w_k" => Some(&mut l.attn.w_k),
            "w_v" => Some(&mut l.attn.w_v),
            "w_o" => Some(&mut l.w_o),
            _ => None,
        }
    }

    fn check_inputs(&self, z_t: ArrayView3<f64>, context: ArrayView2<f64>) -> Result<()> {
        let d = &self.descriptor;
        if z_t.dim() != (d.latent_channels, d.latent_side, d.latent_side) {
            return Err(HcpError::shape(
                "denoise: latent",
                z_t.shape(),
                &[d.latent_channels, d.latent_side, d.latent_side],
            ));
        }
        if context.ncols() != d.embed_dim {
            return Err(HcpError::shape("denoise: text embeddings", context.shape(), &[d.embed_dim]));
        }
        Ok(())
    }
}

impl Denoiser for ToyBackbone {
    fn descriptor(&self) -> &BackboneDescriptor {
        &self.descriptor
    }

    fn denoise_traced(
        &self,
        z_t: ArrayView3<f64>,
        t: u32,
        context: ArrayView2<f64>,
        hooks: &HookSet,
    ) -> Result<TracedDenoise> {
        self.check_inputs(z_t, context)?;
        hooks.check_against(&self.descriptor)?;
        let z = match &self.control {
            Some(c) => &z_t + c,
            None => z_t.to_owned(),
        };
        let (c_lat, side_full, _) = z.dim();
        let mut eps = Array3::<f64>::zeros((c_lat, side_full, side_full));
        for y in 0..side_full {
            for x in 0..side_full {
                for o in 0..c_lat {
                    let mut s = 0.0;
                    for i in 0..c_lat {
                        s += z[[i, y, x]] * self.w_skip[[i, o]];
                    }
                    eps[[o, y, x]] = s;
                }
            }
        }
        let temb = timestep_embedding(t, self.time_dim);
        let mut sites = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let spec = &layer.spec;
            let pooled = avg_pool_rows(z.view(), spec.side)?;
            let mut z_in = matmul(pooled.view(), layer.w_in.view())?;
            z_in += &layer.pos;
            let t_row = layer.w_t.t().dot(&temb);
            for mut row in z_in.rows_mut() {
                row += &t_row;
            }
            let config = self.descriptor.attention_config(spec);
            let (z_out, trace) = match hooks.get(&spec.id) {
                Some(hook) => {
                    let fwd = hcp_cross_attention_traced(
                        z_in.view(),
                        context,
                        &layer.attn,
                        &hook.params,
                        hook.gamma,
                        &config,
                    )?;
                    (fwd.z_out.clone(), SiteTrace::Hooked(Box::new(fwd)))
                }
                None => {
                    let (z_out, m) = cross_attention(z_in.view(), context, &layer.attn, &config)?;
                    let maps = AttentionMaps {
                        base: m.clone(),
                        human_centric: m.clone(),
                        combined: m,
                        gamma: 1.0,
                    };
                    (z_out, SiteTrace::Base(maps))
                }
            };
            let branch = matmul(z_out.view(), layer.w_o.view())?;
            add_upsampled_rows(&mut eps, branch.view(), spec.side);
            sites.push((spec.id.clone(), trace));
        }
        Ok(TracedDenoise { eps, sites })
    }

    fn site_output_grads(
        &self,
        traced: &TracedDenoise,
        d_eps: ArrayView3<f64>,
    ) -> Result<BTreeMap<LayerId, Array2<f64>>> {
        if d_eps.shape() != traced.eps.shape() {
            return Err(HcpError::shape("site_output_grads", d_eps.shape(), traced.eps.shape()));
        }
        let mut out = BTreeMap::new();
        for (layer, (id, site)) in self.layers.iter().zip(&traced.sites) {
            if let SiteTrace::Hooked(_) = site {
                let d_branch = sum_pool_rows(d_eps, layer.spec.side);
                let d_z_out = matmul_bt(d_branch.view(), layer.w_o.view())?;
                out.insert(id.clone(), d_z_out);
            }
        }
        Ok(out)
    }

    fn named_parameters(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out = Vec::with_capacity(self.layers.len() * 7 + 1);
        for l in &self.layers {
            let id = l.spec.id.as_str();
            out.push((format!("{id}.w_in"), l.w_in.view().into_dyn()));
            out.push((format!("{id}.pos"), l.pos.view().into_dyn()));
            out.push((format!("{id}.w_t"), l.w_t.view().into_dyn()));
            out.push((format!("{id}.w_q"), l.attn.w_q.view().into_dyn()));
            out.push((format!("{id}.w_k"), l.attn.w_k.view().into_dyn()));
            out.push((format!("{id}.w_v"), l.attn.w_v.view().into_dyn()));
            out.push((format!("{id}.w_o"), l.w_o.view().into_dyn()));
        }
        out.push(("skip.w".into(), self.w_skip.view().into_dyn()));
        out
    }
}

/// A backbone together with the HcP hooks currently attached to it.
#[derive(Debug, Clone)]
pub struct HookedBackbone<B> {
    base: B,
    hooks: HookSet,
}

impl<B: Denoiser> HookedBackbone<B> {
    pub fn unhooked(base: B) -> Self {
        Self {
            base,
            hooks: HookSet::new(),
        }
    }

    pub fn with_hooks(base: B, hooks: HookSet) -> Result<Self> {
        hooks.check_against(base.descriptor())?;
        Ok(Self { base, hooks })
    }

    pub fn base(&self) -> &B {
        &self.base
    }

    pub fn hooks(&self) -> &HookSet {
        &self.hooks
    }

    pub fn hooks_mut(&mut self) -> &mut HookSet {
        &mut self.hooks
    }

    /// Removes every hook and returns the untouched base backbone.
    pub fn detach(self) -> B {
        self.base
    }

    pub fn denoise(&self, z_t: ArrayView3<f64>, t: u32, context: ArrayView2<f64>) -> Result<DenoiseOutput> {
        self.base.denoise(z_t, t, context, &self.hooks)
    }
}
