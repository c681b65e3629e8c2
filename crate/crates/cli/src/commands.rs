use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use hcp_core::analysis::{
    average_over_timesteps, export_heatmaps, grid_by_scale_and_step, AttentionTrace, TraceRecorder,
};
use hcp_core::archive::ArchiveWriter;
use hcp_core::backbone::{Denoiser, HookedBackbone};
use hcp_core::checkpoint::Checkpoint;
use hcp_core::imageio::{read_png, to_u8, write_png};
use hcp_core::metrics::{clip_score, fid, kid, FeatureSet, FeatureSource, KidResult, ToyEmbedder};
use hcp_core::sampling::{attach_hcp, generate, image_grid, MapObserver};
use hcp_core::tokens::PromptPipeline;
use hcp_core::training::{load_dataset, read_manifest, run_training, RunOptions, FINAL_CHECKPOINT, METRICS_FILE};
use hcp_core::HcpError;

use crate::config::RunConfig;
use crate::error::CliError;

pub const TOOL_ID: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));
pub const RESOLVED_CONFIG: &str = "resolved_config.json";
pub const RUN_INFO: &str = "run_info.json";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunInfo {
    pub tool: String,
    pub command: String,
    pub seed: u64,
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Core(HcpError::io(path, e))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(HcpError::from)?;
    std::fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

/// Writes the resolved configuration and tool/seed identification.
fn write_run_files<T: Serialize>(dir: &Path, command: &str, resolved: &T, seed: u64) -> Result<(), CliError> {
    write_json(&dir.join(RESOLVED_CONFIG), resolved)?;
    write_json(
        &dir.join(RUN_INFO),
        &RunInfo {
            tool: TOOL_ID.into(),
            command: command.into(),
            seed,
        },
    )
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn output_dir(flag: &Option<PathBuf>, cfg: Option<&RunConfig>) -> Result<PathBuf, CliError> {
    flag.clone()
        .or_else(|| cfg.and_then(|c| c.paths.output_dir.clone()))
        .ok_or_else(|| CliError::Usage("no output directory: pass --out or set `paths.output_dir`".into()))
}

#[derive(Debug, Clone, Default)]
pub struct TrainArgs {
    pub config: PathBuf,
    pub out: Option<PathBuf>,
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub out_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub steps: u64,
    pub records: usize,
    pub skipped: Vec<String>,
    pub final_l_hca: Option<f64>,
}

pub fn cmd_train(args: &TrainArgs) -> Result<TrainSummary, CliError> {
    let mut cfg = RunConfig::load(&args.config)?;
    let out = output_dir(&args.out, Some(&cfg))?;
    cfg.paths.output_dir = Some(out.clone());
    let manifest = cfg.required(&cfg.paths.manifest, "manifest")?;
    let entries = read_manifest(manifest)?;
    let pipeline = cfg.pipeline();
    let extractor = cfg.extractor()?;
    let dataset = load_dataset(&entries, &pipeline, extractor.as_ref(), &cfg.codec())?;
    let backbone = cfg.backbone()?;
    let resume = args.resume.as_deref().map(Checkpoint::read).transpose()?;
    create_dir(&out)?;
    let outcome = run_training(
        &backbone,
        &cfg.training,
        &dataset.records,
        &RunOptions {
            out_dir: Some(out.clone()),
            resume,
        },
    )?;
    write_run_files(&out, "train", &cfg, cfg.training.seed)?;
    Ok(TrainSummary {
        checkpoint: out.join(FINAL_CHECKPOINT),
        metrics: out.join(METRICS_FILE),
        out_dir: out,
        steps: outcome.checkpoint.step,
        records: dataset.records.len(),
        skipped: dataset.skipped,
        final_l_hca: outcome.log.last().map(|b| b.mean_l_hca()),
    })
}

#[derive(Debug, Clone, Default)]
pub struct SampleArgs {
    pub config: PathBuf,
    pub prompts: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Overrides `sampler.gamma`.
    pub gamma: Option<f64>,
    /// Samples from the plain backbone even if a checkpoint is configured.
    pub base_only: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub prompt: String,
    pub file: String,
    pub sha256: String,
    pub trace: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SampleSummary {
    pub out_dir: PathBuf,
    pub hooked: bool,
    pub samples: Vec<SampleRecord>,
}

pub const SAMPLES_FILE: &str = "samples.json";
pub const GRID_IMAGE: &str = "grid.png";

pub fn read_prompts(path: &Path) -> Result<Vec<String>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let prompts: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    if prompts.is_empty() {
        return Err(CliError::Usage(format!("prompt file {} is empty", path.display())));
    }
    Ok(prompts)
}

pub fn cmd_sample(args: &SampleArgs) -> Result<SampleSummary, CliError> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(p) = &args.prompts {
        cfg.paths.prompts = Some(p.clone());
    }
    if let Some(c) = &args.checkpoint {
        cfg.paths.checkpoint = Some(c.clone());
    }
    if args.base_only {
        cfg.paths.checkpoint = None;
    }
    if args.gamma.is_some() {
        cfg.sampler.gamma = args.gamma;
    }
    cfg.sampler.validate().map_err(|e| CliError::Usage(format!("sampler: {e}")))?;
    let out = output_dir(&args.out, Some(&cfg))?;
    cfg.paths.output_dir = Some(out.clone());
    let prompts = read_prompts(cfg.required(&cfg.paths.prompts, "prompts")?)?;
    let backbone = cfg.backbone()?;
    let model = match &cfg.paths.checkpoint {
        Some(_) => {
            let ckpt = Checkpoint::read(cfg.required(&cfg.paths.checkpoint, "checkpoint")?)?;
            attach_hcp(backbone, &ckpt, cfg.sampler.gamma, &cfg.layer_aliases)?
        }
        None => HookedBackbone::unhooked(backbone),
    };
    let pipeline = cfg.pipeline();
    let codec = cfg.codec();
    create_dir(&out)?;
    let traced = if cfg.trace.enabled {
        cfg.trace.prompts.unwrap_or(prompts.len())
    } else {
        0
    };
    let mut samples = Vec::with_capacity(prompts.len());
    let mut images = Vec::with_capacity(prompts.len());
    for (k, prompt) in prompts.iter().enumerate() {
        let mut recorder = if k < traced {
            let bundle = pipeline.encode(prompt)?;
            let dir = out.join("traces").join(format!("p{k:03}"));
            Some(TraceRecorder::create(
                &dir,
                model.base().descriptor(),
                cfg.trace.selection(),
                &bundle,
                Some(&cfg.sampler),
            )?)
        } else {
            None
        };
        let sample = generate(
            prompt,
            &pipeline,
            &cfg.sampler,
            &model,
            &codec,
            recorder.as_mut().map(|r| r as &mut dyn MapObserver),
        )?;
        let trace = match recorder {
            Some(r) => Some(relative(&out, &r.finish()?)),
            None => None,
        };
        let bytes = sample.png_bytes()?;
        let file = format!("sample_{k:03}.png");
        let path = out.join(&file);
        std::fs::write(&path, &bytes).map_err(|e| io_err(&path, e))?;
        log::info!("{file}: {prompt}");
        samples.push(SampleRecord {
            prompt: prompt.clone(),
            file,
            sha256: sha256_hex(&bytes),
            trace,
        });
        images.push(sample.image);
    }
    let grid = image_grid(&images, images.len().min(4))?;
    let (h, w, _) = grid.dim();
    let px: Vec<u8> = grid.iter().map(|&v| to_u8(v)).collect();
    write_png(&out.join(GRID_IMAGE), w as u32, h as u32, 3, &px)?;
    let summary = SampleSummary {
        out_dir: out.clone(),
        hooked: !model.hooks().is_empty(),
        samples,
    };
    write_json(&out.join(SAMPLES_FILE), &summary.samples)?;
    write_run_files(&out, "sample", &cfg, cfg.sampler.seed)?;
    Ok(summary)
}

fn relative(base: &Path, path: &Path) -> String {
    path.strip_prefix(base).unwrap_or(path).display().to_string()
}

#[derive(Debug, Clone, Default)]
pub struct AnalyzeArgs {
    pub config: Option<PathBuf>,
    pub trace: Option<PathBuf>,
    pub word: String,
    pub out: Option<PathBuf>,
    pub display: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalyzeSettings {
    pub trace: PathBuf,
    pub word: String,
    pub display: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct AnalyzeSummary {
    pub out_dir: PathBuf,
    pub prompt: String,
    pub word: String,
    pub token_indices: Vec<usize>,
    /// Token whose maps fill the grid and averages.
    pub token: usize,
    pub timesteps: Vec<u32>,
    pub layers: Vec<String>,
}

pub const GRID_DIR: &str = "grid";
pub const AVERAGE_DIR: &str = "average";
pub const ANALYSIS_FILE: &str = "analysis.json";

/// Token indices of `word` in a trace's prompt, re-tokenised with the toy
/// tokenizer.
pub fn word_token_indices(trace: &AttentionTrace, word: &str) -> Result<Vec<usize>, CliError> {
    let capacity = trace.prompt.token_ids.len();
    let bundle = PromptPipeline::toy(0, capacity, 2).encode(&trace.prompt.text)?;
    if bundle.token_ids() != trace.prompt.token_ids {
        return Err(CliError::Usage(
            "trace token ids do not match the toy tokenizer; cannot locate words".into(),
        ));
    }
    bundle.indices_for_word(word).map_err(|e| CliError::Usage(e.to_string()))
}

pub fn cmd_analyze(args: &AnalyzeArgs) -> Result<AnalyzeSummary, CliError> {
    let cfg = args.config.as_deref().map(RunConfig::load).transpose()?;
    let trace_dir = args
        .trace
        .clone()
        .or_else(|| cfg.as_ref().and_then(|c| c.paths.trace.clone()))
        .ok_or_else(|| CliError::Usage("no trace: pass --trace or set `paths.trace`".into()))?;
    let display = args
        .display
        .or_else(|| cfg.as_ref().map(|c| c.analysis.display))
        .unwrap_or_else(|| crate::config::AnalysisConfig::default().display);
    let out = output_dir(&args.out, cfg.as_ref())?;
    let trace = AttentionTrace::read(&trace_dir)?;
    let indices = word_token_indices(&trace, &args.word)?;
    let token = indices[0];
    let grid = grid_by_scale_and_step(&trace, token, display)?;
    let averages = average_over_timesteps(&trace, token)?;
    create_dir(&out)?;
    grid.write_archive(&out.join(GRID_DIR))?;
    let mut w = ArchiveWriter::create(out.join(AVERAGE_DIR))?;
    for (id, map) in &averages {
        w.write_f64(id.as_str(), map.shape(), map.iter().copied())?;
    }
    w.set_metadata(serde_json::json!({ "kind": "token-average", "token": token, "word": args.word }));
    w.finish()?;
    export_heatmaps(&grid.named_cells(), &out.join("heatmaps").join(GRID_DIR))?;
    let avg_named: Vec<_> = averages.iter().map(|(id, m)| (id.to_string(), m.clone())).collect();
    export_heatmaps(&avg_named, &out.join("heatmaps").join(AVERAGE_DIR))?;
    let summary = AnalyzeSummary {
        out_dir: out.clone(),
        prompt: trace.prompt.text.clone(),
        word: args.word.clone(),
        token_indices: indices,
        token,
        timesteps: grid.timesteps.clone(),
        layers: grid.layers.iter().map(|l| l.id.to_string()).collect(),
    };
    write_json(&out.join(ANALYSIS_FILE), &summary)?;
    let settings = AnalyzeSettings {
        trace: trace_dir,
        word: args.word.clone(),
        display,
    };
    let seed = trace.sampler.as_ref().map(|s| s.seed).unwrap_or(0);
    match &cfg {
        Some(c) => write_run_files(&out, "analyze", &serde_json::json!({ "config": c, "analyze": settings }), seed)?,
        None => write_run_files(&out, "analyze", &serde_json::json!({ "analyze": settings }), seed)?,
    }
    Ok(summary)
}

#[derive(Debug, Clone, Default)]
pub struct EvalArgs {
    pub config: Option<PathBuf>,
    pub a: PathBuf,
    pub b: PathBuf,
    pub out: Option<PathBuf>,
    pub kid_subset_size: Option<usize>,
    pub kid_subsets: Option<usize>,
    pub seed: Option<u64>,
    pub clip_image: Option<PathBuf>,
    pub clip_text: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClipReport {
    pub score: f64,
    pub convention: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub fid: f64,
    pub kid: KidResult,
    pub kid_subset_size: usize,
    pub kid_subsets: usize,
    pub seed: u64,
    pub n_a: usize,
    pub n_b: usize,
    pub embedder_a: String,
    pub embedder_b: String,
    pub clip: Option<ClipReport>,
}

pub const EVAL_FILE: &str = "eval.json";

pub fn cmd_eval(args: &EvalArgs) -> Result<EvalReport, CliError> {
    let cfg = args.config.as_deref().map(RunConfig::load).transpose()?;
    let defaults = cfg.as_ref().map(|c| c.eval.clone()).unwrap_or_default();
    let subset_size = args.kid_subset_size.unwrap_or(defaults.kid_subset_size);
    let subsets = args.kid_subsets.unwrap_or(defaults.kid_subsets);
    let seed = args.seed.unwrap_or(defaults.seed);
    let a = FeatureSet::read_archive(&args.a)?;
    let b = FeatureSet::read_archive(&args.b)?;
    if a.embedder != b.embedder {
        log::warn!("feature sets come from different embedders: {} vs {}", a.embedder, b.embedder);
    }
    let clip = match (&args.clip_image, &args.clip_text) {
        (Some(i), Some(t)) => {
            let img = FeatureSet::read_archive(i)?;
            let txt = FeatureSet::read_archive(t)?;
            Some(ClipReport {
                score: clip_score(img.features.view(), txt.features.view())?,
                convention: "100 * max(0, cos)".into(),
            })
        }
        (None, None) => None,
        _ => return Err(CliError::Usage("--clip-image and --clip-text go together".into())),
    };
    let report = EvalReport {
        fid: fid(&a, &b)?,
        kid: kid(&a, &b, subset_size, subsets, seed)?,
        kid_subset_size: subset_size,
        kid_subsets: subsets,
        seed,
        n_a: a.len(),
        n_b: b.len(),
        embedder_a: a.embedder,
        embedder_b: b.embedder,
        clip,
    };
    if let Some(out) = args.out.clone().or_else(|| cfg.as_ref().and_then(|c| c.paths.output_dir.clone())) {
        create_dir(&out)?;
        write_json(&out.join(EVAL_FILE), &report)?;
        let settings = serde_json::json!({
            "a": args.a, "b": args.b,
            "kid_subset_size": subset_size, "kid_subsets": subsets, "seed": seed,
            "clip_image": args.clip_image, "clip_text": args.clip_text,
        });
        write_run_files(&out, "eval", &settings, seed)?;
    }
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct FeaturesArgs {
    pub images: PathBuf,
    pub out: PathBuf,
    pub source: FeatureSource,
    pub config: Option<PathBuf>,
    pub embedder_seed: Option<u64>,
    pub dim: Option<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct FeaturesSummary {
    pub out_dir: PathBuf,
    pub count: usize,
    pub embedder: String,
    pub files: Vec<String>,
}

/// Grayscale is replicated; alpha is dropped.
fn as_rgb(img: ndarray::Array3<f64>) -> ndarray::Array3<f64> {
    let (h, w, c) = img.dim();
    match c {
        3 => img,
        1 | 2 => ndarray::Array3::from_shape_fn((h, w, 3), |(y, x, _)| img[[y, x, 0]]),
        _ => img.slice(ndarray::s![.., .., 0..3]).to_owned(),
    }
}

/// Embeds every PNG in a directory (sorted by name) with the toy embedder.
pub fn cmd_features(args: &FeaturesArgs) -> Result<FeaturesSummary, CliError> {
    let cfg = args.config.as_deref().map(RunConfig::load).transpose()?;
    let defaults = cfg.map(|c| c.eval).unwrap_or_default();
    let embedder = ToyEmbedder::new(
        args.embedder_seed.unwrap_or(defaults.embedder_seed),
        args.dim.unwrap_or(defaults.embedder_dim),
    );
    let mut files: Vec<PathBuf> = std::fs::read_dir(&args.images)
        .map_err(|e| io_err(&args.images, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::Usage(format!("no PNG files in {}", args.images.display())));
    }
    let images = files
        .iter()
        .map(|f| read_png(f).map(as_rgb))
        .collect::<Result<Vec<_>, _>>()?;
    let set = embedder.embed_all(&images, args.source)?;
    set.write_archive(&args.out)?;
    Ok(FeaturesSummary {
        out_dir: args.out.clone(),
        count: set.len(),
        embedder: set.embedder,
        files: files.iter().map(|f| f.display().to_string()).collect(),
    })
}
