//! JSON run configuration shared by every subcommand.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use hcp_core::analysis::TraceSelection;
use hcp_core::backbone::{BackboneDescriptor, ToyBackbone, ToyLatentCodec};
use hcp_core::objectives::LayerId;
use hcp_core::prior::{FeatureExtractor, PrecomputedExtractor, ToyExtractor};
use hcp_core::sampling::SamplerConfig;
use hcp_core::tokens::PromptPipeline;
use hcp_core::training::TrainingConfig;

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub seed: u64,
    pub model_channels: usize,
    pub embed_dim: usize,
    pub token_capacity: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model_channels: ToyBackbone::DEFAULT_MODEL_CHANNELS,
            embed_dim: 32,
            token_capacity: 16,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextConfig {
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExtractorKind {
    #[default]
    Toy,
    Precomputed,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorConfig {
    pub extractor: ExtractorKind,
    pub seed: u64,
    /// Archive directory for the precomputed extractor.
    pub features_dir: Option<PathBuf>,
    pub extractor_id: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TraceConfig {
    pub enabled: bool,
    /// Only the first `prompts` prompts are traced; all when unset.
    pub prompts: Option<usize>,
    pub layers: Option<Vec<LayerId>>,
    pub timesteps: Option<Vec<u32>>,
}

impl TraceConfig {
    pub fn selection(&self) -> TraceSelection {
        TraceSelection {
            layers: self.layers.clone(),
            timesteps: self.timesteps.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    pub display: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self { display: 32 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub kid_subset_size: usize,
    pub kid_subsets: usize,
    pub seed: u64,
    pub embedder_seed: u64,
    pub embedder_dim: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            kid_subset_size: 100,
            kid_subsets: 100,
            seed: 0,
            embedder_seed: 0,
            embedder_dim: 16,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub manifest: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub prompts: Option<PathBuf>,
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub backbone: BackboneConfig,
    pub text: TextConfig,
    pub prior: PriorConfig,
    pub training: TrainingConfig,
    pub sampler: SamplerConfig,
    pub trace: TraceConfig,
    pub analysis: AnalysisConfig,
    pub eval: EvalConfig,
    /// Checkpoint layer id → target backbone layer id.
    pub layer_aliases: BTreeMap<LayerId, LayerId>,
    pub paths: PathsConfig,
}

fn resolve(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

impl RunConfig {
    /// Parses `text`, reporting the offending field path on failure.
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            CliError::Usage(format!("config field `{path}`: {}", e.into_inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative paths are taken from the file's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let base = if base.as_os_str().is_empty() { Path::new(".") } else { base };
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let p = &mut self.paths;
        for slot in [&mut p.manifest, &mut p.output_dir, &mut p.checkpoint, &mut p.prompts, &mut p.trace] {
            resolve(base, slot);
        }
        resolve(base, &mut self.prior.features_dir);
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let field = |name: &str, e: hcp_core::HcpError| CliError::Usage(format!("config field `{name}`: {e}"));
        self.training.validate().map_err(|e| field("training", e))?;
        self.sampler.validate().map_err(|e| field("sampler", e))?;
        let b = &self.backbone;
        if b.model_channels == 0 || b.embed_dim == 0 || b.token_capacity < 2 {
            return Err(CliError::Usage(
                "config field `backbone`: model_channels and embed_dim must be positive, token_capacity ≥ 2".into(),
            ));
        }
        if self.analysis.display == 0 {
            return Err(CliError::Usage("config field `analysis.display`: must be positive".into()));
        }
        if self.prior.extractor == ExtractorKind::Precomputed && self.prior.features_dir.is_none() {
            return Err(CliError::Usage(
                "config field `prior.features_dir`: required by the precomputed extractor".into(),
            ));
        }
        self.trace
            .selection()
            .validate(&self.descriptor())
            .map_err(|e| field("trace.layers", e))?;
        Ok(())
    }

    pub fn descriptor(&self) -> BackboneDescriptor {
        BackboneDescriptor::minimal(self.backbone.embed_dim, self.backbone.token_capacity)
    }

    pub fn backbone(&self) -> Result<ToyBackbone, CliError> {
        Ok(ToyBackbone::new(self.descriptor(), self.backbone.model_channels, self.backbone.seed)?)
    }

    pub fn pipeline(&self) -> PromptPipeline {
        PromptPipeline::toy(self.text.seed, self.backbone.token_capacity, self.backbone.embed_dim)
    }

    pub fn extractor(&self) -> Result<Box<dyn FeatureExtractor>, CliError> {
        Ok(match self.prior.extractor {
            ExtractorKind::Toy => Box::new(ToyExtractor::new(self.prior.seed)),
            ExtractorKind::Precomputed => {
                let dir = self.prior.features_dir.as_ref().expect("validated");
                let id = self.prior.extractor_id.clone().unwrap_or_else(|| "precomputed".into());
                Box::new(PrecomputedExtractor::open(id, dir)?)
            }
        })
    }

    pub fn codec(&self) -> ToyLatentCodec {
        let d = self.descriptor();
        ToyLatentCodec {
            latent_side: d.latent_side,
            image_side: hcp_core::fixture::IMAGE_SIDE,
        }
    }

    pub fn required<'a>(&self, slot: &'a Option<PathBuf>, name: &str) -> Result<&'a Path, CliError> {
        let p = slot
            .as_deref()
            .ok_or_else(|| CliError::Usage(format!("config field `paths.{name}` is required")))?;
        if !p.exists() {
            return Err(CliError::Usage(format!(
                "config field `paths.{name}`: {} does not exist",
                p.display()
            )));
        }
        Ok(p)
    }
}
