//! Array archive: a directory of raw little-endian `f32` arrays described by
//! a JSON manifest. Used for attention traces, prior stacks, feature sets and
//! analysis grids.
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/a000000.f32
//! <dir>/a000001.f32
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{HcpError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FORMAT_NAME: &str = "hcp-array-archive";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE: &str = "f32le";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveManifest {
    pub format: String,
    pub version: u32,
    pub arrays: Vec<ArrayEntry>,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

/// Streams arrays to disk one at a time; the manifest is written on
/// [`finish`](Self::finish).
#[derive(Debug)]
pub struct ArchiveWriter {
    dir: PathBuf,
    entries: Vec<ArrayEntry>,
    names: BTreeMap<String, usize>,
    metadata: serde_json::Value,
}

impl ArchiveWriter {
    pub fn create(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        std::fs::create_dir_all(&dir).map_err(|e| HcpError::io(&dir, e))?;
        Ok(Self {
            dir,
            entries: Vec::new(),
            names: BTreeMap::new(),
            metadata: serde_json::Value::Null,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn set_metadata(&mut self, metadata: serde_json::Value) {
        self.metadata = metadata;
    }

    pub fn write_f32(&mut self, name: &str, shape: &[usize], data: &[f32]) -> Result<()> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(HcpError::shape(
                format!("archive array `{name}`"),
                shape,
                &[data.len()],
            ));
        }
        if self.names.contains_key(name) {
            return Err(HcpError::Validation(format!(
                "archive already contains an array named `{name}`"
            )));
        }
        let file = format!("a{:06}.f32", self.entries.len());
        let path = self.dir.join(&file);
        let f = File::create(&path).map_err(|e| HcpError::io(&path, e))?;
        let mut w = BufWriter::new(f);
        for v in data {
            w.write_all(&v.to_le_bytes()).map_err(|e| HcpError::io(&path, e))?;
        }
        w.flush().map_err(|e| HcpError::io(&path, e))?;
        self.names.insert(name.to_string(), self.entries.len());
        self.entries.push(ArrayEntry {
            name: name.to_string(),
            file,
            shape: shape.to_vec(),
            dtype: DTYPE.into(),
        });
        Ok(())
    }

    /// Stores an `f64` array; values are rounded to `f32`.
    pub fn write_f64(&mut self, name: &str, shape: &[usize], data: impl IntoIterator<Item = f64>) -> Result<()> {
        let v: Vec<f32> = data.into_iter().map(|x| x as f32).collect();
        self.write_f32(name, shape, &v)
    }

    pub fn finish(self) -> Result<ArchiveManifest> {
        let manifest = ArchiveManifest {
            format: FORMAT_NAME.into(),
            version: FORMAT_VERSION,
            arrays: self.entries,
            metadata: self.metadata,
        };
        let path = self.dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&manifest)?;
        std::fs::write(&path, text).map_err(|e| HcpError::io(&path, e))?;
        Ok(manifest)
    }
}

#[derive(Debug, Clone)]
pub struct ArchiveReader {
    dir: PathBuf,
    manifest: ArchiveManifest,
    index: BTreeMap<String, usize>,
}

impl ArchiveReader {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| HcpError::io(&path, e))?;
        let manifest: ArchiveManifest = serde_json::from_str(&text)?;
        if manifest.format != FORMAT_NAME || manifest.version != FORMAT_VERSION {
            return Err(HcpError::Validation(format!(
                "{} is not a {FORMAT_NAME} v{FORMAT_VERSION} archive",
                dir.display()
            )));
        }
        let index = manifest
            .arrays
            .iter()
            .enumerate()
            .map(|(i, e)| (e.name.clone(), i))
            .collect();
        Ok(Self {
            dir,
            manifest,
            index,
        })
    }

    pub fn manifest(&self) -> &ArchiveManifest {
        &self.manifest
    }

    pub fn metadata(&self) -> &serde_json::Value {
        &self.manifest.metadata
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.manifest.arrays.iter().map(|e| e.name.as_str())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn read(&self, name: &str) -> Result<ArrayD<f32>> {
        let entry = self
            .index
            .get(name)
            .map(|&i| &self.manifest.arrays[i])
            .ok_or_else(|| HcpError::Validation(format!("archive has no array named `{name}`")))?;
        if entry.dtype != DTYPE {
            return Err(HcpError::Validation(format!(
                "unsupported dtype `{}` for `{name}`",
                entry.dtype
            )));
        }
        let path = self.dir.join(&entry.file);
        let bytes = std::fs::read(&path).map_err(|e| HcpError::io(&path, e))?;
        let n: usize = entry.shape.iter().product();
        if bytes.len() != n * 4 {
            return Err(HcpError::Validation(format!(
                "array `{name}` has {} bytes, expected {}",
                bytes.len(),
                n * 4
            )));
        }
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        ArrayD::from_shape_vec(IxDyn(&entry.shape), data)
            .map_err(|e| HcpError::Validation(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn write_read_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = ArchiveWriter::create(dir.path().join("arc")).unwrap();
        let data: Vec<f32> = (0..12).map(|i| i as f32 * 0.1 - 0.3).collect();
        w.write_f32("x/y", &[3, 4], &data).unwrap();
        w.write_f32("empty", &[0, 5], &[]).unwrap();
        w.set_metadata(serde_json::json!({"k": 1}));
        w.finish().unwrap();
        let r = ArchiveReader::open(dir.path().join("arc")).unwrap();
        let a = r.read("x/y").unwrap();
        assert_eq!(a.shape(), &[3, 4]);
        assert_eq!(a.iter().copied().collect::<Vec<_>>(), data);
        assert_eq!(r.read("empty").unwrap().len(), 0);
        assert_eq!(r.metadata()["k"], 1);
        assert!(r.read("missing").is_err());
    }

    #[test]
    fn rejects_duplicate_names_and_bad_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = ArchiveWriter::create(dir.path()).unwrap();
        w.write_f32("a", &[1], &[1.0]).unwrap();
        assert!(w.write_f32("a", &[1], &[1.0]).is_err());
        assert!(w.write_f32("b", &[2], &[1.0]).is_err());
    }
}
