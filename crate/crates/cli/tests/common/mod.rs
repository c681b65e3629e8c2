#![allow(dead_code)]

use std::path::{Path, PathBuf};

use hcp_cli::RunConfig;
use hcp_core::backbone::ToyBackbone;
use hcp_core::training::{load_dataset, read_manifest, TripletRecord};

pub const TRACE_WORD: &str = "yoga";

pub fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join("toy")
}

pub fn fixture_config_path() -> PathBuf {
    fixture_dir().join("config.json")
}

pub fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join("golden")
}

pub fn fixture_config() -> RunConfig {
    RunConfig::load(&fixture_config_path()).expect("fixture config")
}

pub fn fixture_records(cfg: &RunConfig) -> Vec<TripletRecord> {
    let entries = read_manifest(cfg.paths.manifest.as_deref().expect("manifest")).expect("manifest");
    let extractor = cfg.extractor().expect("extractor");
    load_dataset(&entries, &cfg.pipeline(), extractor.as_ref(), &cfg.codec())
        .expect("dataset")
        .records
}

pub fn fixture_backbone(cfg: &RunConfig) -> ToyBackbone {
    cfg.backbone().expect("backbone")
}

/// Writes a copy of the fixture config with `edit` applied, next to the
/// fixture data so relative paths still resolve.
pub fn edited_config(dir: &Path, edit: impl FnOnce(&mut serde_json::Value)) -> PathBuf {
    let text = std::fs::read_to_string(fixture_config_path()).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    let fixture = fixture_dir();
    for key in ["manifest", "prompts"] {
        if let Some(p) = v["paths"].get(key).and_then(|p| p.as_str()) {
            v["paths"][key] = fixture.join(p).display().to_string().into();
        }
    }
    edit(&mut v);
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&v).unwrap()).unwrap();
    path
}

#[derive(Debug, serde::Deserialize, serde::Serialize, PartialEq)]
pub struct GoldenAnalysis {
    pub token: usize,
    pub timesteps: Vec<u32>,
    pub layers: Vec<String>,
    pub display: usize,
    /// `[timesteps, layers, display, display]` row-major.
    pub grid: Vec<f64>,
    /// Per layer, `[side, side]` row-major.
    pub average: std::collections::BTreeMap<String, Vec<f64>>,
}

pub fn read_analysis(out: &Path) -> GoldenAnalysis {
    use hcp_core::analysis::ScaleStepGrid;
    use hcp_core::archive::ArchiveReader;
    let grid = ScaleStepGrid::read_archive(&out.join(hcp_cli::commands::GRID_DIR)).unwrap();
    let avg = ArchiveReader::open(out.join(hcp_cli::commands::AVERAGE_DIR)).unwrap();
    let names: Vec<String> = avg.names().map(String::from).collect();
    let average = names
        .into_iter()
        .map(|n| {
            let a = avg.read(&n).unwrap();
            (n, a.iter().map(|&v| f64::from(v)).collect())
        })
        .collect();
    GoldenAnalysis {
        token: grid.token,
        timesteps: grid.timesteps.clone(),
        layers: grid.layers.iter().map(|l| l.id.to_string()).collect(),
        display: grid.display,
        grid: grid.cells.iter().copied().collect(),
        average,
    }
}
