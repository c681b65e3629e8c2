//! HcP fine-tuning: dataset loading, AdamW over HcP parameters only, the
//! freeze guard, and the resumable training loop.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::{
    hcp_attention_backward, AttentionGradInputs, HcpGrads, HcpLayerParams, DEFAULT_GAMMA,
    DEFAULT_HCP_INIT_SCALE, DEFAULT_HCP_WIDTH,
};
use crate::backbone::{
    noise_with_alpha_bar, Denoiser, HcpHook, HookSet, NoiseSchedule, SiteTrace, ToyLatentCodec,
};
use crate::checkpoint::Checkpoint;
use crate::error::{HcpError, Result};
use crate::imageio::read_png;
use crate::objectives::{
    alignment_loss_with_grad, denoising_loss, denoising_loss_grad, total_loss, LayerId,
    LossBreakdown, StageToggles, WeightSchedule,
};
use crate::prior::{build_prior_stack, FeatureExtractor, PriorFeatureStack, PriorImage, PriorKind};
use crate::tokens::{PromptBundle, PromptPipeline};

/// Stream reserved for HcP parameter initialisation.
const INIT_STREAM: u64 = u64::MAX;
/// Fraction of unreadable records above which loading aborts.
pub const MAX_SKIP_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Overrides `epochs` when set.
    pub max_steps: Option<u64>,
    pub t_max: u32,
    /// Inclusive window `[t_lo, t_hi]`; `t = 0` (no noise) is never drawn.
    pub t_window: [u32; 2],
    /// Which stages use the cosine weight; disabled stages use λ = 1.
    pub cosine: StageToggles,
    /// Whether the denoising loss also trains HcP through `M̂`.
    pub ldm_into_hcp: bool,
    pub hcp_width: usize,
    pub hcp_init_scale: f64,
    /// Global L2 gradient clipping; off when `None`.
    pub grad_clip: Option<f64>,
    pub checkpoint_every: Option<u64>,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            gamma: DEFAULT_GAMMA,
            learning_rate: 1e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 1,
            epochs: 10,
            max_steps: None,
            t_max: 1000,
            t_window: [0, 1000],
            cosine: StageToggles::default(),
            ldm_into_hcp: true,
            hcp_width: DEFAULT_HCP_WIDTH,
            hcp_init_scale: DEFAULT_HCP_INIT_SCALE,
            grad_clip: None,
            checkpoint_every: None,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.t_window;
        if self.t_max == 0 {
            return Err(HcpError::Validation("t_max must be at least 1".into()));
        }
        if !(lo <= hi && hi <= self.t_max) {
            return Err(HcpError::Validation(format!(
                "t_window [{lo}, {hi}] must satisfy 0 ≤ t_lo ≤ t_hi ≤ {}",
                self.t_max
            )));
        }
        if hi == 0 {
            return Err(HcpError::Validation("t_window must include a timestep ≥ 1".into()));
        }
        if !(self.alpha >= 0.0) {
            return Err(HcpError::Validation(format!("alpha must be ≥ 0, got {}", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(HcpError::Validation(format!("gamma must lie in [0, 1], got {}", self.gamma)));
        }
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(HcpError::Validation("learning_rate must be > 0 and weight_decay ≥ 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(HcpError::Validation("invalid AdamW moment parameters".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.hcp_width == 0 {
            return Err(HcpError::Validation(
                "batch_size, epochs and hcp_width must be positive".into(),
            ));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(HcpError::Validation("grad_clip must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn total_steps(&self, records: usize) -> u64 {
        self.max_steps.unwrap_or_else(|| {
            let per_epoch = records.div_ceil(self.batch_size) as u64;
            per_epoch * self.epochs as u64
        })
    }

    /// Timestep for one step, uniform over the integers of the window.
    pub fn draw_timestep<R: Rng + ?Sized>(&self, rng: &mut R) -> u32 {
        let lo = self.t_window[0].max(1);
        rng.random_range(lo..=self.t_window[1])
    }
}

/// Deterministic per-step generator.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

/// One line of the dataset manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub prompt: String,
    pub prior_image: PathBuf,
    pub id: String,
    #[serde(default)]
    pub prior_kind: PriorKind,
}

/// Reads a JSON Lines manifest; relative paths resolve against its directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let f = File::open(path).map_err(|e| HcpError::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| HcpError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut e: ManifestEntry = serde_json::from_str(&line).map_err(|err| {
            HcpError::Validation(format!("{}:{}: {err}", path.display(), n + 1))
        })?;
        if e.image.is_relative() {
            e.image = base.join(&e.image);
        }
        if e.prior_image.is_relative() {
            e.prior_image = base.join(&e.prior_image);
        }
        out.push(e);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct TripletRecord {
    pub id: String,
    pub z0: Array3<f64>,
    pub prompt: PromptBundle,
    pub prior: Arc<PriorFeatureStack>,
    pub prior_hash: String,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub records: Vec<TripletRecord>,
    pub skipped: Vec<String>,
}

/// Loads every manifest entry. Unreadable records are skipped and logged;
/// more than 10% skipped aborts. Prior stacks are shared by content hash.
pub fn load_dataset(
    entries: &[ManifestEntry],
    pipeline: &PromptPipeline,
    extractor: &dyn FeatureExtractor,
    codec: &ToyLatentCodec,
) -> Result<Dataset> {
    if entries.is_empty() {
        return Err(HcpError::Validation("dataset manifest is empty".into()));
    }
    let mut cache: HashMap<String, Arc<PriorFeatureStack>> = HashMap::new();
    let mut records = Vec::with_capacity(entries.len());
    let mut skipped = Vec::new();
    for e in entries {
        let loaded = (|| -> Result<TripletRecord> {
            let image = read_png(&e.image)?;
            let z0 = codec.encode(image.view())?;
            let prompt = pipeline.encode_for_training(&e.prompt)?;
            let prior_image = PriorImage::load(&e.prior_image, e.prior_kind)?;
            let hash = prior_image.content_hash();
            let prior = match cache.get(&hash) {
                Some(s) => s.clone(),
                None => {
                    let s = Arc::new(build_prior_stack(&prior_image, extractor)?);
                    cache.insert(hash.clone(), s.clone());
                    s
                }
            };
            Ok(TripletRecord {
                id: e.id.clone(),
                z0,
                prompt,
                prior,
                prior_hash: hash,
            })
        })();
        match loaded {
            Ok(r) => records.push(r),
            Err(err) => {
                log::warn!("skipping record `{}`: {err}", e.id);
                skipped.push(e.id.clone());
            }
        }
    }
    if skipped.len() as f64 > MAX_SKIP_FRACTION * entries.len() as f64 {
        return Err(HcpError::Validation(format!(
            "{} of {} records unreadable (limit 10%): {}",
            skipped.len(),
            entries.len(),
            skipped.join(", ")
        )));
    }
    Ok(Dataset { records, skipped })
}

/// Decoupled-weight-decay Adam moments for every hooked layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: BTreeMap<LayerId, HcpGrads>,
    pub v: BTreeMap<LayerId, HcpGrads>,
}

impl AdamState {
    pub fn new(hooks: &HookSet) -> Self {
        let zeros: BTreeMap<LayerId, HcpGrads> = hooks
            .iter()
            .map(|(id, h)| (id.clone(), HcpGrads::zeros_like(&h.params)))
            .collect();
        Self {
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update(&mut self, hooks: &mut HookSet, grads: &BTreeMap<LayerId, HcpGrads>, cfg: &TrainingConfig) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for (id, hook) in hooks.iter_mut() {
            if !hook.params.trainable {
                continue;
            }
            let g = grads
                .get(id)
                .ok_or_else(|| HcpError::State(format!("no gradient for layer `{id}`")))?;
            let m = self.m.get_mut(id).ok_or_else(|| HcpError::State(format!("no moments for `{id}`")))?;
            let v = self.v.get_mut(id).ok_or_else(|| HcpError::State(format!("no moments for `{id}`")))?;
            for (((p, g), m), v) in hook.params.blocks.iter_mut().zip(&g.blocks).zip(&mut m.blocks).zip(&mut v.blocks) {
                let pairs = [
                    (p.weight.as_slice_mut(), g.weight.as_slice(), m.weight.as_slice_mut(), v.weight.as_slice_mut()),
                    (p.bias.as_slice_mut(), g.bias.as_slice(), m.bias.as_slice_mut(), v.bias.as_slice_mut()),
                ];
                for (p, g, m, v) in pairs {
                    let (Some(p), Some(g), Some(m), Some(v)) = (p, g, m, v) else {
                        return Err(HcpError::State("non-contiguous parameter array".into()));
                    };
                    for i in 0..p.len() {
                        p[i] *= 1.0 - cfg.learning_rate * cfg.weight_decay;
                        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                        let mh = m[i] / bc1;
                        let vh = v[i] / bc2;
                        p[i] -= cfg.learning_rate * mh / (vh.sqrt() + cfg.adam_eps);
                    }
                }
            }
        }
        Ok(())
    }
}

fn digest_array<'a>(shape: &[usize], values: impl Iterator<Item = &'a f64>) -> String {
    let mut h = Sha256::new();
    for s in shape {
        h.update((*s as u64).to_le_bytes());
    }
    for v in values {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Snapshot of base-parameter digests.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FreezeGuard {
    digests: Vec<(String, String)>,
}

impl FreezeGuard {
    pub fn capture(backbone: &dyn Denoiser) -> Self {
        Self {
            digests: backbone
                .named_parameters()
                .into_iter()
                .map(|(name, a)| {
                    let d = digest_array(a.shape(), a.iter());
                    (name, d)
                })
                .collect(),
        }
    }

    pub fn digests(&self) -> &[(String, String)] {
        &self.digests
    }

    /// Fails naming the first block whose digest changed.
    pub fn verify(&self, backbone: &dyn Denoiser) -> Result<()> {
        let now = Self::capture(backbone);
        if now.digests.len() != self.digests.len() {
            return Err(HcpError::FreezeViolation("parameter block set changed".into()));
        }
        for ((name, before), (_, after)) in self.digests.iter().zip(&now.digests) {
            if before != after {
                return Err(HcpError::FreezeViolation(name.clone()));
            }
        }
        Ok(())
    }
}

/// Digest of each hooked layer's HcP parameters.
pub fn hcp_digests(hooks: &HookSet) -> BTreeMap<LayerId, String> {
    hooks
        .iter()
        .map(|(id, h)| {
            let mut hasher = Sha256::new();
            for (name, shape, data) in h.params.flat_arrays() {
                hasher.update(name.as_bytes());
                hasher.update(digest_array(&shape, data.iter()).as_bytes());
            }
            (id.clone(), hex::encode(hasher.finalize()))
        })
        .collect()
}

/// Losses and HcP gradients for one batch at a fixed timestep and noise.
#[derive(Debug, Clone)]
pub struct BatchEvaluation {
    pub breakdown: LossBreakdown,
    pub grads: BTreeMap<LayerId, HcpGrads>,
}

pub struct Trainer<'a, B: Denoiser> {
    pub backbone: &'a B,
    pub config: TrainingConfig,
    pub hooks: HookSet,
    pub optimizer: AdamState,
    pub schedule: NoiseSchedule,
    pub weights: WeightSchedule,
    /// Steps completed so far.
    pub step: u64,
    guard: FreezeGuard,
}

impl<'a, B: Denoiser> Trainer<'a, B> {
    pub fn new(backbone: &'a B, config: TrainingConfig) -> Result<Self> {
        config.validate()?;
        let desc = backbone.descriptor();
        desc.validate()?;
        let mut rng = step_rng(config.seed, INIT_STREAM);
        let mut hooks = HookSet::new();
        for l in &desc.layers {
            let params = HcpLayerParams::new(
                &mut rng,
                desc.embed_dim,
                config.hcp_width,
                l.key_dim,
                config.hcp_init_scale,
            )?;
            hooks.attach(l.id.clone(), HcpHook { params, gamma: config.gamma });
        }
        let schedule = NoiseSchedule::ddpm_default(config.t_max)?;
        let weights = WeightSchedule::new(config.t_max, desc.partition()?)?.with_toggles(config.cosine);
        Ok(Self {
            backbone,
            optimizer: AdamState::new(&hooks),
            hooks,
            schedule,
            weights,
            step: 0,
            guard: FreezeGuard::capture(backbone),
            config,
        })
    }

    /// Restores HcP parameters, optimizer moments and the step counter.
    pub fn from_checkpoint(backbone: &'a B, ckpt: &Checkpoint) -> Result<Self> {
        let desc_hash = backbone.descriptor().hash();
        if ckpt.descriptor_hash != desc_hash {
            return Err(HcpError::Compatibility(crate::sampling::compatibility_report(
                &ckpt.descriptor,
                backbone.descriptor(),
                &BTreeMap::new(),
            )));
        }
        let mut t = Self::new(backbone, ckpt.config.clone())?;
        for (id, params) in &ckpt.layers {
            let hook = t
                .hooks
                .get_mut(id)
                .ok_or_else(|| HcpError::Config(format!("checkpoint layer `{id}` not in backbone")))?;
            hook.params = params.clone();
        }
        if let Some(opt) = &ckpt.optimizer {
            t.optimizer = opt.clone();
        }
        t.step = ckpt.step;
        Ok(t)
    }

    pub fn guard(&self) -> &FreezeGuard {
        &self.guard
    }

    /// Forward and backward for a batch at timestep `t` with the given
    /// noise (one array per record). Does not update parameters.
    pub fn evaluate(
        &self,
        batch: &[&TripletRecord],
        t: u32,
        noise: &[Array3<f64>],
        with_grads: bool,
    ) -> Result<BatchEvaluation> {
        if batch.is_empty() || batch.len() != noise.len() {
            return Err(HcpError::Validation("batch and noise must be non-empty and aligned".into()));
        }
        let desc = self.backbone.descriptor();
        let inv_b = 1.0 / batch.len() as f64;
        let alpha_bar = self.schedule.alpha_bar(t)?;
        let mut grads: BTreeMap<LayerId, HcpGrads> = self
            .hooks
            .iter()
            .map(|(id, h)| (id.clone(), HcpGrads::zeros_like(&h.params)))
            .collect();
        let mut l_hca: BTreeMap<LayerId, f64> = BTreeMap::new();
        let mut l_ldm = 0.0;
        for (rec, eps) in batch.iter().zip(noise) {
            let z_t = noise_with_alpha_bar(rec.z0.view(), eps.view(), alpha_bar)?;
            let traced = self.backbone.denoise_traced(z_t.view(), t, rec.prompt.embeddings.view(), &self.hooks)?;
            let ldm = denoising_loss(eps.view().into_dyn(), traced.eps.view().into_dyn())?;
            l_ldm += ldm * inv_b;
            let site_grads = if with_grads && self.config.ldm_into_hcp {
                let d_eps = denoising_loss_grad(eps.view().into_dyn(), traced.eps.view().into_dyn())?
                    .into_dimensionality::<ndarray::Ix3>()
                    .map_err(|e| HcpError::Validation(e.to_string()))?
                    * inv_b;
                self.backbone.site_output_grads(&traced, d_eps.view())?
            } else {
                BTreeMap::new()
            };
            for (id, site) in &traced.sites {
                let SiteTrace::Hooked(fwd) = site else { continue };
                let spec = desc
                    .layer(id)
                    .ok_or_else(|| HcpError::Config(format!("unknown layer `{id}`")))?;
                let h = rec.prior.for_side(spec.side)?;
                let (loss, d_mh) = alignment_loss_with_grad(h.view(), fwd.maps.human_centric.view(), &rec.prompt.human_indices)?;
                *l_hca.entry(id.clone()).or_insert(0.0) += loss * inv_b;
                if !with_grads {
                    continue;
                }
                let lambda = self.weights.lambda(id, t)?;
                let d_mh = d_mh * (self.config.alpha * lambda * inv_b);
                let dz: Option<&Array2<f64>> = site_grads.get(id);
                let inputs = AttentionGradInputs {
                    d_z_out: dz.map(|a| a.view()),
                    d_human_centric: Some(d_mh.view()),
                    d_combined: None,
                };
                let hook = self.hooks.get(id).expect("hooked site has a hook");
                let g = hcp_attention_backward(fwd, &hook.params, inputs)?;
                grads.get_mut(id).expect("gradient slot").add_assign(&g);
            }
        }
        let mut breakdown = total_loss(&l_hca, l_ldm, t, self.config.alpha, self.config.gamma, &self.weights)?;
        breakdown.step = self.step + 1;
        if !breakdown.total.is_finite() {
            return Err(HcpError::Numerical(format!("non-finite loss at timestep {t}")));
        }
        Ok(BatchEvaluation { breakdown, grads })
    }

    /// Draws `t` and noise for the next step, evaluates, and applies one
    /// AdamW update to HcP parameters only.
    pub fn training_step(&mut self, batch: &[&TripletRecord]) -> Result<LossBreakdown> {
        let next = self.step + 1;
        let mut rng = step_rng(self.config.seed, next);
        let t = self.config.draw_timestep(&mut rng);
        let noise: Vec<Array3<f64>> = batch
            .iter()
            .map(|r| Array3::from_shape_simple_fn(r.z0.raw_dim(), || rng.sample(StandardNormal)))
            .collect();
        let BatchEvaluation { breakdown, mut grads } = self.evaluate(batch, t, &noise, true)?;
        if let Some(clip) = self.config.grad_clip {
            let norm = grads.values().map(HcpGrads::sq_norm).sum::<f64>().sqrt();
            if norm > clip {
                for g in grads.values_mut() {
                    g.scale(clip / norm);
                }
            }
        }
        self.optimizer.update(&mut self.hooks, &grads, &self.config)?;
        self.step = next;
        Ok(breakdown)
    }

    /// Records of step `step` (1-based), cycling through the dataset in order.
    pub fn batch_for_step<'r>(&self, records: &'r [TripletRecord], step: u64) -> Vec<&'r TripletRecord> {
        let b = self.config.batch_size;
        let start = ((step - 1) as usize * b) % records.len();
        (0..b).map(|k| &records[(start + k) % records.len()]).collect()
    }

    /// Mean alignment loss per layer over every record at fixed timesteps,
    /// with noise drawn from `seed`. No parameters change.
    pub fn alignment_profile(&self, records: &[TripletRecord], timesteps: &[u32], seed: u64) -> Result<BTreeMap<LayerId, f64>> {
        let mut acc: BTreeMap<LayerId, f64> = BTreeMap::new();
        let weight = 1.0 / (records.len() * timesteps.len()) as f64;
        for (k, &t) in timesteps.iter().enumerate() {
            let mut rng = step_rng(seed, k as u64);
            for rec in records {
                let eps = Array3::from_shape_simple_fn(rec.z0.raw_dim(), || rng.sample(StandardNormal));
                let ev = self.evaluate(&[rec], t, &[eps], false)?;
                for (id, v) in ev.breakdown.l_hca_per_layer {
                    *acc.entry(id).or_insert(0.0) += v * weight;
                }
            }
        }
        Ok(acc)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        self.guard.verify(self.backbone)?;
        Ok(Checkpoint {
            step: self.step,
            descriptor_hash: self.backbone.descriptor().hash(),
            descriptor: self.backbone.descriptor().clone(),
            config: self.config.clone(),
            gamma: self.config.gamma,
            layers: self.hooks.iter().map(|(id, h)| (id.clone(), h.params.clone())).collect(),
            optimizer: Some(self.optimizer.clone()),
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Directory for `metrics.jsonl` and checkpoints.
    pub out_dir: Option<PathBuf>,
    pub resume: Option<Checkpoint>,
}

#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LossBreakdown>,
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

/// Runs the configured number of steps, appending every step's breakdown
/// to `metrics.jsonl` and writing periodic and final checkpoints.
pub fn run_training<B: Denoiser>(
    backbone: &B,
    config: &TrainingConfig,
    records: &[TripletRecord],
    options: &RunOptions,
) -> Result<TrainingOutcome> {
    if records.is_empty() {
        return Err(HcpError::Validation("no training records".into()));
    }
    let mut trainer = match &options.resume {
        Some(ckpt) => {
            if &ckpt.config != config {
                return Err(HcpError::Validation(
                    "resume checkpoint was produced with a different training config".into(),
                ));
            }
            Trainer::from_checkpoint(backbone, ckpt)?
        }
        None => Trainer::new(backbone, config.clone())?,
    };
    let total = config.total_steps(records.len());
    let mut writer = match &options.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| HcpError::io(dir, e))?;
            let path = dir.join(METRICS_FILE);
            let f = std::fs::OpenOptions::new()
                .create(true)
                .append(options.resume.is_some())
                .write(true)
                .truncate(options.resume.is_none())
                .open(&path)
                .map_err(|e| HcpError::io(&path, e))?;
            Some((BufWriter::new(f), path))
        }
        None => None,
    };
    let mut log = Vec::new();
    while trainer.step < total {
        let batch = trainer.batch_for_step(records, trainer.step + 1);
        let b = trainer.training_step(&batch)?;
        if let Some((w, path)) = writer.as_mut() {
            serde_json::to_writer(&mut *w, &b)?;
            w.write_all(b"\n").map_err(|e| HcpError::io(path.as_path(), e))?;
        }
        log.push(b);
        if let (Some(every), Some(dir)) = (config.checkpoint_every, &options.out_dir) {
            if every > 0 && trainer.step % every == 0 {
                trainer.checkpoint()?.write(&dir.join(format!("step{:06}.ckpt", trainer.step)))?;
            }
        }
    }
    if let Some((w, path)) = writer.as_mut() {
        w.flush().map_err(|e| HcpError::io(path.as_path(), e))?;
    }
    let checkpoint = trainer.checkpoint()?;
    if let Some(dir) = &options.out_dir {
        checkpoint.write(&dir.join(FINAL_CHECKPOINT))?;
    }
    Ok(TrainingOutcome { checkpoint, log })
}
