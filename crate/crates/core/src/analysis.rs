//! Attention trace recording and the averaged-map and step×scale analyses.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array4, ArrayView2, Ix2, Ix4};
use serde::{Deserialize, Serialize};

use crate::archive::{ArchiveReader, ArchiveWriter};
use crate::attention::{check_rows, AttentionMaps};
use crate::backbone::BackboneDescriptor;
use crate::error::{HcpError, Result};
use crate::imageio::{to_u8, write_png};
use crate::objectives::{LayerId, Stage};
use crate::sampling::{MapObserver, SamplerConfig};
use crate::tensor::resize_bilinear;
use crate::tokens::PromptBundle;

const TRACE_KIND: &str = "attention-trace";
const GRID_KIND: &str = "scale-step-grid";
pub const HEATMAP_MANIFEST: &str = "heatmaps.json";

/// Which layers and timesteps to record; `None` means all.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TraceSelection {
    pub layers: Option<Vec<LayerId>>,
    pub timesteps: Option<Vec<u32>>,
}

impl TraceSelection {
    pub fn all() -> Self {
        Self::default()
    }

    pub fn nothing() -> Self {
        Self {
            layers: Some(Vec::new()),
            timesteps: None,
        }
    }

    pub fn validate(&self, descriptor: &BackboneDescriptor) -> Result<()> {
        if let Some(layers) = &self.layers {
            for id in layers {
                if descriptor.layer(id).is_none() {
                    return Err(HcpError::Validation(format!(
                        "trace selection names unknown layer `{id}`"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn includes(&self, layer: &LayerId, t: u32) -> bool {
        self.layers.as_ref().is_none_or(|l| l.contains(layer))
            && self.timesteps.as_ref().is_none_or(|ts| ts.contains(&t))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TraceKey {
    pub layer: LayerId,
    pub timestep: u32,
    pub head: usize,
}

impl TraceKey {
    fn array_name(&self) -> String {
        format!("{}/t{:04}/h{:02}", self.layer, self.timestep, self.head)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceLayer {
    pub id: LayerId,
    pub stage: Stage,
    pub side: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TracePrompt {
    pub text: String,
    pub token_ids: Vec<u32>,
    pub human_indices: Vec<usize>,
}

impl From<&PromptBundle> for TracePrompt {
    fn from(b: &PromptBundle) -> Self {
        Self {
            text: b.raw_text.clone(),
            token_ids: b.token_ids(),
            human_indices: b.human_indices.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TraceMetadata {
    kind: String,
    prompt: TracePrompt,
    sampler: Option<SamplerConfig>,
    layers: Vec<TraceLayer>,
    entries: Vec<TraceKey>,
}

/// Per-(layer, timestep, head) combined maps `[P, N]`, stored as `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    pub entries: BTreeMap<TraceKey, Array2<f32>>,
    /// Every layer of the backbone, in forward order.
    pub layers: Vec<TraceLayer>,
    pub prompt: TracePrompt,
    pub sampler: Option<SamplerConfig>,
}

fn trace_layers(descriptor: &BackboneDescriptor) -> Vec<TraceLayer> {
    descriptor
        .layers
        .iter()
        .map(|l| TraceLayer {
            id: l.id.clone(),
            stage: l.stage,
            side: l.side,
        })
        .collect()
}

fn check_map(key: &TraceKey, map: ArrayView2<f32>, tol: f64) -> Result<()> {
    let m = map.mapv(f64::from).insert_axis(ndarray::Axis(0));
    check_rows(m.view(), tol).map_err(|e| {
        HcpError::Validation(format!("trace map {} is not row-stochastic: {e}", key.array_name()))
    })
}

impl AttentionTrace {
    pub const ROW_TOLERANCE: f64 = 1e-5;

    pub fn layer(&self, id: &LayerId) -> Option<&TraceLayer> {
        self.layers.iter().find(|l| &l.id == id)
    }

    pub fn timesteps(&self) -> Vec<u32> {
        let set: BTreeSet<u32> = self.entries.keys().map(|k| k.timestep).collect();
        set.into_iter().rev().collect()
    }

    pub fn recorded_layers(&self) -> Vec<&TraceLayer> {
        let ids: BTreeSet<&LayerId> = self.entries.keys().map(|k| &k.layer).collect();
        self.layers.iter().filter(|l| ids.contains(&l.id)).collect()
    }

    pub fn token_count(&self) -> Option<usize> {
        self.entries.values().next().map(|m| m.ncols())
    }

    pub fn validate(&self) -> Result<()> {
        for (key, map) in &self.entries {
            let layer = self
                .layer(&key.layer)
                .ok_or_else(|| HcpError::Validation(format!("trace entry for unknown layer `{}`", key.layer)))?;
            if map.nrows() != layer.side * layer.side {
                return Err(HcpError::shape(
                    "trace map rows",
                    map.shape(),
                    &[layer.side * layer.side],
                ));
            }
            check_map(key, map.view(), Self::ROW_TOLERANCE)?;
        }
        Ok(())
    }

    fn metadata(&self) -> TraceMetadata {
        TraceMetadata {
            kind: TRACE_KIND.into(),
            prompt: self.prompt.clone(),
            sampler: self.sampler.clone(),
            layers: self.layers.clone(),
            entries: self.entries.keys().cloned().collect(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let mut w = ArchiveWriter::create(dir)?;
        for (key, map) in &self.entries {
            let data: Vec<f32> = map.iter().copied().collect();
            w.write_f32(&key.array_name(), map.shape(), &data)?;
        }
        w.set_metadata(serde_json::to_value(self.metadata())?);
        w.finish()?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let r = ArchiveReader::open(dir)?;
        let meta: TraceMetadata = serde_json::from_value(r.metadata().clone())?;
        if meta.kind != TRACE_KIND {
            return Err(HcpError::Validation(format!(
                "{} holds `{}`, not an attention trace",
                dir.display(),
                meta.kind
            )));
        }
        let mut entries = BTreeMap::new();
        for key in meta.entries {
            let a = r
                .read(&key.array_name())?
                .into_dimensionality::<Ix2>()
                .map_err(|e| HcpError::Validation(e.to_string()))?;
            entries.insert(key, a);
        }
        let trace = Self {
            entries,
            layers: meta.layers,
            prompt: meta.prompt,
            sampler: meta.sampler,
        };
        trace.validate()?;
        Ok(trace)
    }
}

/// Streams selected combined maps to an archive as sampling proceeds.
pub struct TraceRecorder {
    writer: ArchiveWriter,
    selection: TraceSelection,
    layers: Vec<TraceLayer>,
    prompt: TracePrompt,
    sampler: Option<SamplerConfig>,
    keys: Vec<TraceKey>,
}

impl TraceRecorder {
    pub fn create(
        dir: impl AsRef<Path>,
        descriptor: &BackboneDescriptor,
        selection: TraceSelection,
        prompt: &PromptBundle,
        sampler: Option<&SamplerConfig>,
    ) -> Result<Self> {
        selection.validate(descriptor)?;
        Ok(Self {
            writer: ArchiveWriter::create(dir)?,
            selection,
            layers: trace_layers(descriptor),
            prompt: prompt.into(),
            sampler: sampler.cloned(),
            keys: Vec::new(),
        })
    }

    pub fn dir(&self) -> PathBuf {
        self.writer.dir().to_path_buf()
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn finish(mut self) -> Result<PathBuf> {
        let dir = self.dir();
        self.keys.sort();
        let meta = TraceMetadata {
            kind: TRACE_KIND.into(),
            prompt: self.prompt,
            sampler: self.sampler,
            layers: self.layers,
            entries: self.keys,
        };
        self.writer.set_metadata(serde_json::to_value(meta)?);
        self.writer.finish()?;
        Ok(dir)
    }
}

impl MapObserver for TraceRecorder {
    fn observe(&mut self, t: u32, maps: &[(LayerId, AttentionMaps)]) -> Result<()> {
        for (id, m) in maps {
            if !self.selection.includes(id, t) {
                continue;
            }
            for (head, map) in m.combined.outer_iter().enumerate() {
                let key = TraceKey {
                    layer: id.clone(),
                    timestep: t,
                    head,
                };
                let data: Vec<f32> = map.iter().map(|&v| v as f32).collect();
                self.writer.write_f32(&key.array_name(), map.shape(), &data)?;
                self.keys.push(key);
            }
        }
        Ok(())
    }
}

/// Mean over timesteps and heads of every recorded map, per layer `[P, N]`.
pub fn average_maps(trace: &AttentionTrace) -> BTreeMap<LayerId, Array2<f64>> {
    let mut sums: BTreeMap<LayerId, (Array2<f64>, usize)> = BTreeMap::new();
    for (key, map) in &trace.entries {
        let slot = sums
            .entry(key.layer.clone())
            .or_insert_with(|| (Array2::zeros(map.raw_dim()), 0));
        slot.0.zip_mut_with(map, |s, &v| *s += f64::from(v));
        slot.1 += 1;
    }
    sums.into_iter().map(|(id, (s, n))| (id, s / n as f64)).collect()
}

/// Mean over timesteps and heads of token `i`'s column, per layer, shaped
/// `[side, side]`.
pub fn average_over_timesteps(trace: &AttentionTrace, token: usize) -> Result<BTreeMap<LayerId, Array2<f64>>> {
    let n = trace.token_count().unwrap_or(0);
    if token >= n {
        return Err(HcpError::Validation(format!(
            "token index {token} out of range for {n} tokens"
        )));
    }
    let mut sums: BTreeMap<LayerId, (Array2<f64>, usize)> = BTreeMap::new();
    for (key, map) in &trace.entries {
        let side = trace.layer(&key.layer).map(|l| l.side).unwrap_or(0);
        let slot = sums
            .entry(key.layer.clone())
            .or_insert_with(|| (Array2::zeros((side, side)), 0));
        for (p, &v) in map.column(token).iter().enumerate() {
            slot.0[[p / side, p % side]] += f64::from(v);
        }
        slot.1 += 1;
    }
    Ok(sums.into_iter().map(|(id, (s, n))| (id, s / n as f64)).collect())
}

/// Head-mean maps of one token for every (timestep, layer) pair, resized to
/// a common display size. Rows are timesteps in inference order, columns
/// are layers in forward order.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleStepGrid {
    pub token: usize,
    pub timesteps: Vec<u32>,
    pub layers: Vec<TraceLayer>,
    pub display: usize,
    /// `[timesteps, layers, display, display]`
    pub cells: Array4<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct GridMetadata {
    kind: String,
    token: usize,
    timesteps: Vec<u32>,
    layers: Vec<TraceLayer>,
    display: usize,
}

impl ScaleStepGrid {
    pub fn cell(&self, timestep: u32, layer: &LayerId) -> Option<ArrayView2<'_, f64>> {
        let r = self.timesteps.iter().position(|&t| t == timestep)?;
        let c = self.layers.iter().position(|l| &l.id == layer)?;
        Some(self.cells.slice(ndarray::s![r, c, .., ..]))
    }

    pub fn write_archive(&self, dir: &Path) -> Result<()> {
        let mut w = ArchiveWriter::create(dir)?;
        w.write_f64("cells", self.cells.shape(), self.cells.iter().copied())?;
        w.set_metadata(serde_json::to_value(GridMetadata {
            kind: GRID_KIND.into(),
            token: self.token,
            timesteps: self.timesteps.clone(),
            layers: self.layers.clone(),
            display: self.display,
        })?);
        w.finish()?;
        Ok(())
    }

    pub fn read_archive(dir: &Path) -> Result<Self> {
        let r = ArchiveReader::open(dir)?;
        let meta: GridMetadata = serde_json::from_value(r.metadata().clone())?;
        if meta.kind != GRID_KIND {
            return Err(HcpError::Validation(format!("{} is not a grid archive", dir.display())));
        }
        let cells = r
            .read("cells")?
            .into_dimensionality::<Ix4>()
            .map_err(|e| HcpError::Validation(e.to_string()))?
            .mapv(f64::from);
        Ok(Self {
            token: meta.token,
            timesteps: meta.timesteps,
            layers: meta.layers,
            display: meta.display,
            cells,
        })
    }

    /// Each cell as a named map, for heatmap export.
    pub fn named_cells(&self) -> Vec<(String, Array2<f64>)> {
        let mut out = Vec::new();
        for (r, t) in self.timesteps.iter().enumerate() {
            for (c, l) in self.layers.iter().enumerate() {
                out.push((
                    format!("t{t:04}_{}", l.id),
                    self.cells.slice(ndarray::s![r, c, .., ..]).to_owned(),
                ));
            }
        }
        out
    }
}

pub fn grid_by_scale_and_step(trace: &AttentionTrace, token: usize, display: usize) -> Result<ScaleStepGrid> {
    let n = trace.token_count().unwrap_or(0);
    if token >= n {
        return Err(HcpError::Validation(format!(
            "token index {token} out of range for {n} tokens"
        )));
    }
    if display == 0 {
        return Err(HcpError::Validation("display size must be positive".into()));
    }
    let layers: Vec<TraceLayer> = trace.recorded_layers().into_iter().cloned().collect();
    let timesteps = trace.timesteps();
    let sides: BTreeSet<usize> = layers.iter().map(|l| l.side).collect();
    if sides.len() < 2 || timesteps.len() < 2 {
        return Err(HcpError::Validation(format!(
            "grid needs ≥2 scales and ≥2 timesteps, trace has {} and {}",
            sides.len(),
            timesteps.len()
        )));
    }
    let mut sums: BTreeMap<(u32, LayerId), (Array2<f64>, usize)> = BTreeMap::new();
    for (key, map) in &trace.entries {
        let side = trace.layer(&key.layer).expect("validated layer").side;
        let slot = sums
            .entry((key.timestep, key.layer.clone()))
            .or_insert_with(|| (Array2::zeros((side, side)), 0));
        for (p, &v) in map.column(token).iter().enumerate() {
            slot.0[[p / side, p % side]] += f64::from(v);
        }
        slot.1 += 1;
    }
    let mut cells = Array4::<f64>::zeros((timesteps.len(), layers.len(), display, display));
    for (r, &t) in timesteps.iter().enumerate() {
        for (c, l) in layers.iter().enumerate() {
            let (sum, count) = sums.get(&(t, l.id.clone())).ok_or_else(|| {
                HcpError::Validation(format!("trace lacks layer `{}` at timestep {t}", l.id))
            })?;
            let mean = (sum / *count as f64).insert_axis(ndarray::Axis(0));
            let resized = resize_bilinear(mean.view(), (display, display))?;
            cells
                .slice_mut(ndarray::s![r, c, .., ..])
                .assign(&resized.index_axis(ndarray::Axis(0), 0));
        }
    }
    Ok(ScaleStepGrid {
        token,
        timesteps,
        layers,
        display,
        cells,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapEntry {
    pub name: String,
    pub file: String,
    pub width: usize,
    pub height: usize,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapManifest {
    pub colormap: String,
    pub maps: Vec<HeatmapEntry>,
}

fn file_stem(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect()
}

/// Grayscale PNG per map, normalised to its own `[min, max]`; a constant
/// map renders black. Bounds go into `heatmaps.json`.
pub fn export_heatmaps(maps: &[(String, Array2<f64>)], out_dir: &Path) -> Result<HeatmapManifest> {
    std::fs::create_dir_all(out_dir).map_err(|e| HcpError::io(out_dir, e))?;
    let mut entries = Vec::with_capacity(maps.len());
    for (k, (name, map)) in maps.iter().enumerate() {
        if map.iter().any(|v| !v.is_finite()) {
            return Err(HcpError::Numerical(format!("heatmap `{name}` has non-finite values")));
        }
        let min = map.iter().copied().fold(f64::INFINITY, f64::min);
        let max = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let range = max - min;
        let px: Vec<u8> = map
            .iter()
            .map(|&v| if range > 0.0 { to_u8((v - min) / range) } else { 0 })
            .collect();
        let (h, w) = map.dim();
        let file = format!("{k:03}_{}.png", file_stem(name));
        write_png(&out_dir.join(&file), w as u32, h as u32, 1, &px)?;
        entries.push(HeatmapEntry {
            name: name.clone(),
            file,
            width: w,
            height: h,
            min,
            max,
        });
    }
    let manifest = HeatmapManifest {
        colormap: "grayscale".into(),
        maps: entries,
    };
    let path = out_dir.join(HEATMAP_MANIFEST);
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| HcpError::io(&path, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imageio::read_png;

    fn layers() -> Vec<TraceLayer> {
        vec![
            TraceLayer { id: "down.0".into(), stage: Stage::Down, side: 4 },
            TraceLayer { id: "mid.0".into(), stage: Stage::Mid, side: 2 },
        ]
    }

    fn uniform(p: usize, n: usize) -> Array2<f32> {
        Array2::from_elem((p, n), 1.0 / n as f32)
    }

    fn trace_with(entries: Vec<(TraceKey, Array2<f32>)>) -> AttentionTrace {
        AttentionTrace {
            entries: entries.into_iter().collect(),
            layers: layers(),
            prompt: TracePrompt { text: "a man".into(), token_ids: vec![1, 5, 2, 0], human_indices: vec![2] },
            sampler: None,
        }
    }

    fn key(layer: &str, t: u32, head: usize) -> TraceKey {
        TraceKey { layer: layer.into(), timestep: t, head }
    }

    fn one_hot_rows(p: usize, n: usize, col: usize) -> Array2<f32> {
        let mut m = Array2::zeros((p, n));
        m.column_mut(col).fill(1.0);
        m
    }

    #[test]
    fn selection_checks_layers() {
        let desc = BackboneDescriptor::minimal(8, 4);
        assert!(TraceSelection { layers: Some(vec!["nope".into()]), timesteps: None }.validate(&desc).is_err());
        TraceSelection::all().validate(&desc).unwrap();
        assert!(!TraceSelection::nothing().includes(&"mid.0".into(), 3));
    }

    #[test]
    fn two_step_average_matches_hand_computation() {
        // column 1 is 1.0 at t = 20 and 0.0 at t = 10, so the mean is 0.5 everywhere
        let t = trace_with(vec![
            (key("mid.0", 20, 0), one_hot_rows(4, 4, 1)),
            (key("mid.0", 10, 0), one_hot_rows(4, 4, 3)),
        ]);
        let avg = average_over_timesteps(&t, 1).unwrap();
        assert_eq!(avg[&LayerId::from("mid.0")], Array2::from_elem((2, 2), 0.5));
        let avg3 = average_over_timesteps(&t, 3).unwrap();
        assert_eq!(avg3[&LayerId::from("mid.0")], Array2::from_elem((2, 2), 0.5));
        assert!(average_over_timesteps(&t, 4).is_err());
    }

    #[test]
    fn single_step_average_is_head_mean() {
        let mut a = uniform(4, 4);
        a[[0, 0]] = 0.7;
        a[[0, 1]] = 0.1;
        let t = trace_with(vec![(key("mid.0", 5, 0), a.clone()), (key("mid.0", 5, 1), uniform(4, 4))]);
        let avg = average_over_timesteps(&t, 0).unwrap();
        let expected = (f64::from(a[[0, 0]]) + 0.25) / 2.0;
        assert!((avg[&LayerId::from("mid.0")][[0, 0]] - expected).abs() < 1e-12);
    }

    #[test]
    fn grid_layout_and_constant_maps() {
        let t = trace_with(vec![
            (key("down.0", 30, 0), uniform(16, 4)),
            (key("down.0", 10, 0), uniform(16, 4)),
            (key("mid.0", 30, 0), uniform(4, 4)),
            (key("mid.0", 10, 0), one_hot_rows(4, 4, 2)),
        ]);
        let g = grid_by_scale_and_step(&t, 2, 8).unwrap();
        assert_eq!(g.timesteps, vec![30, 10]);
        assert_eq!(g.cells.shape(), &[2, 2, 8, 8]);
        assert!(g.cell(30, &"down.0".into()).unwrap().iter().all(|&v| (v - 0.25).abs() < 1e-7));
        assert!(g.cell(10, &"mid.0".into()).unwrap().iter().all(|&v| v == 1.0));
        let narrow = trace_with(vec![(key("mid.0", 30, 0), uniform(4, 4)), (key("mid.0", 10, 0), uniform(4, 4))]);
        assert!(grid_by_scale_and_step(&narrow, 0, 8).is_err());
    }

    #[test]
    fn trace_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = uniform(16, 4);
        m[[3, 0]] = 0.1;
        m[[3, 1]] = 0.4;
        let t = trace_with(vec![(key("down.0", 7, 0), m), (key("mid.0", 7, 3), uniform(4, 4))]);
        t.write(dir.path()).unwrap();
        assert_eq!(AttentionTrace::read(dir.path()).unwrap(), t);
        let empty = trace_with(vec![]);
        let dir2 = tempfile::tempdir().unwrap();
        empty.write(dir2.path()).unwrap();
        assert_eq!(AttentionTrace::read(dir2.path()).unwrap(), empty);
    }

    #[test]
    fn read_rejects_non_stochastic_maps() {
        let dir = tempfile::tempdir().unwrap();
        let t = trace_with(vec![(key("mid.0", 1, 0), Array2::from_elem((4, 4), 0.5))]);
        t.write(dir.path()).unwrap();
        assert!(AttentionTrace::read(dir.path()).is_err());
    }

    #[test]
    fn heatmap_cases() {
        let dir = tempfile::tempdir().unwrap();
        let mut hot = Array2::<f64>::zeros((4, 5));
        hot[[2, 3]] = 1.0;
        let manifest = export_heatmaps(
            &[("flat".into(), Array2::from_elem((3, 3), 0.2)), ("hot/1".into(), hot)],
            dir.path(),
        )
        .unwrap();
        assert_eq!(manifest.maps[0].min, manifest.maps[0].max);
        let flat = read_png(&dir.path().join(&manifest.maps[0].file)).unwrap();
        assert!(flat.iter().all(|&v| v == flat[[0, 0, 0]]));
        let img = read_png(&dir.path().join(&manifest.maps[1].file)).unwrap();
        assert_eq!(img.dim(), (4, 5, 1));
        for ((y, x, _), &v) in img.indexed_iter() {
            assert_eq!(v, if (y, x) == (2, 3) { 1.0 } else { 0.0 });
        }
        assert!(export_heatmaps(&[("bad".into(), Array2::from_elem((1, 1), f64::NAN))], dir.path()).is_err());
    }
}
