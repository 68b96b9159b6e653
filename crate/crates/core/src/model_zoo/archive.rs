//! Named-tensor weight archive.
//!
//! Layout: an 8-byte little-endian header length, a UTF-8 JSON header that
//! maps tensor names to `{dtype, shape, data_offsets}` (offsets relative to
//! the start of the payload), then the contiguous little-endian payload.
//! Free-form string metadata lives under the reserved `__metadata__` key;
//! the provenance tag is stored there as `provenance`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::nn::Module;

pub const METADATA_KEY: &str = "__metadata__";

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("archive io error at {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("corrupt archive header: {0}")]
    CorruptHeader(String),
    #[error("unsupported dtype `{dtype}` for tensor `{name}`")]
    Dtype { name: String, dtype: String },
    #[error("shape mismatch for `{name}`: model {expected:?}, archive {found:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("archive is missing tensors: {}", .0.join(", "))]
    MissingTensors(Vec<String>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct HeaderEntry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [usize; 2],
}

/// In-memory archive: tensors by name plus string metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightArchive {
    tensors: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
    metadata: BTreeMap<String, String>,
}

/// Outcome of loading an archive into a model.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadReport {
    pub loaded: usize,
    /// Archive tensors the model has no slot for.
    pub unused: Vec<String>,
}

impl WeightArchive {
    pub fn from_module(m: &dyn Module, provenance: &str) -> Self {
        let mut tensors = BTreeMap::new();
        m.visit("", &mut |name, p| {
            let prev = tensors.insert(name.clone(), (p.shape.clone(), p.value.clone()));
            assert!(prev.is_none(), "duplicate tensor name {name}");
        });
        let mut metadata = BTreeMap::new();
        metadata.insert("provenance".to_string(), provenance.to_string());
        Self { tensors, metadata }
    }

    pub fn provenance(&self) -> Option<&str> {
        self.metadata.get("provenance").map(String::as_str)
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn set_metadata(&mut self, key: &str, value: &str) {
        self.metadata.insert(key.to_string(), value.to_string());
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn tensor(&self, name: &str) -> Option<(&[usize], &[f32])> {
        self.tensors.get(name).map(|(s, v)| (s.as_slice(), v.as_slice()))
    }

    pub fn remove(&mut self, name: &str) -> Option<(Vec<usize>, Vec<f32>)> {
        self.tensors.remove(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Keep only tensors whose names start with `prefix`.
    pub fn retain_prefix(&mut self, prefix: &str) {
        self.tensors.retain(|k, _| k.starts_with(prefix));
    }

    /// SHA-256 of a tensor's little-endian bytes.
    pub fn digest(&self, name: &str) -> Option<String> {
        self.tensors.get(name).map(|(_, v)| {
            let mut h = Sha256::new();
            for x in v {
                h.update(x.to_le_bytes());
            }
            hex_string(&h.finalize())
        })
    }

    pub fn digests(&self) -> BTreeMap<String, String> {
        self.tensors.keys().map(|k| (k.clone(), self.digest(k).unwrap())).collect()
    }

    pub fn payload_len(&self) -> usize {
        self.tensors.values().map(|(_, v)| v.len() * 4).sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = serde_json::Map::new();
        header.insert(
            METADATA_KEY.to_string(),
            serde_json::to_value(&self.metadata).expect("string map"),
        );
        let mut offset = 0usize;
        for (name, (shape, values)) in &self.tensors {
            let len = values.len() * 4;
            let entry = HeaderEntry { dtype: "F32".into(), shape: shape.clone(), data_offsets: [offset, offset + len] };
            header.insert(name.clone(), serde_json::to_value(entry).expect("header entry"));
            offset += len;
        }
        let mut json = serde_json::to_vec(&serde_json::Value::Object(header)).expect("json header");
        while json.len() % 8 != 0 {
            json.push(b' ');
        }
        let mut out = Vec::with_capacity(8 + json.len() + offset);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, values) in self.tensors.values() {
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ArchiveError> {
        let corrupt = |m: String| ArchiveError::CorruptHeader(m);
        if bytes.len() < 8 {
            return Err(corrupt("file shorter than the length prefix".into()));
        }
        let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        if hlen > bytes.len() - 8 {
            return Err(corrupt(format!("header length {hlen} exceeds file size")));
        }
        let header: serde_json::Map<String, serde_json::Value> =
            serde_json::from_slice(&bytes[8..8 + hlen]).map_err(|e| corrupt(e.to_string()))?;
        let payload = &bytes[8 + hlen..];
        let mut tensors = BTreeMap::new();
        let mut metadata = BTreeMap::new();
        for (name, value) in header {
            if name == METADATA_KEY {
                metadata = serde_json::from_value(value).map_err(|e| corrupt(e.to_string()))?;
                continue;
            }
            let e: HeaderEntry =
                serde_json::from_value(value).map_err(|err| corrupt(format!("{name}: {err}")))?;
            if e.dtype != "F32" {
                return Err(ArchiveError::Dtype { name, dtype: e.dtype });
            }
            let [a, b] = e.data_offsets;
            let expect = e.shape.iter().product::<usize>() * 4;
            if b < a || b > payload.len() || b - a != expect {
                return Err(corrupt(format!("bad offsets for {name}")));
            }
            let values = payload[a..b]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.insert(name, (e.shape, values));
        }
        Ok(Self { tensors, metadata })
    }

    pub fn write(&self, path: &Path) -> Result<(), ArchiveError> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|source| io_err(dir, source))?;
        }
        fs::write(path, self.to_bytes()).map_err(|source| io_err(path, source))
    }

    pub fn read(path: &Path) -> Result<Self, ArchiveError> {
        let bytes = fs::read(path).map_err(|source| io_err(path, source))?;
        Self::from_bytes(&bytes)
    }

    /// Copy tensors into `m` for every model slot whose name starts with
    /// `scope` (all slots when empty). Every such slot must be present.
    pub fn apply(&self, m: &mut dyn Module, scope: &str) -> Result<LoadReport, ArchiveError> {
        let mut missing = Vec::new();
        let mut mismatch = None;
        let mut used = BTreeSet::new();
        // Validate first so a failed load leaves the model untouched.
        m.visit("", &mut |name, p| {
            if !name.starts_with(scope) {
                return;
            }
            match self.tensors.get(&name) {
                None => missing.push(name),
                Some((shape, _)) if shape != &p.shape && mismatch.is_none() => {
                    mismatch = Some(ArchiveError::ShapeMismatch {
                        name: name.clone(),
                        expected: p.shape.clone(),
                        found: shape.clone(),
                    });
                }
                Some(_) => {
                    used.insert(name);
                }
            }
        });
        if let Some(e) = mismatch {
            return Err(e);
        }
        if !missing.is_empty() {
            return Err(ArchiveError::MissingTensors(missing));
        }
        m.visit_mut("", &mut |name, p| {
            if used.contains(&name) {
                p.value.copy_from_slice(&self.tensors[&name].1);
            }
        });
        let unused = self
            .tensors
            .keys()
            .filter(|k| k.starts_with(scope) && !used.contains(*k))
            .cloned()
            .collect();
        Ok(LoadReport { loaded: used.len(), unused })
    }
}

fn io_err(path: &Path, source: std::io::Error) -> ArchiveError {
    ArchiveError::Io { path: path.display().to_string(), source }
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn save_archive(m: &dyn Module, path: &Path, provenance: &str) -> Result<(), ArchiveError> {
    WeightArchive::from_module(m, provenance).write(path)
}

/// Load every tensor of `m` from `path`.
pub fn load_archive(path: &Path, m: &mut dyn Module) -> Result<LoadReport, ArchiveError> {
    WeightArchive::read(path)?.apply(m, "")
}

/// Load only `encoder.*` tensors.
pub fn load_encoder(path: &Path, m: &mut dyn Module) -> Result<LoadReport, ArchiveError> {
    WeightArchive::read(path)?.apply(m, "encoder.")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model_zoo::{build_model, EncoderSpec, HeadSpec, ProjectorSpec};

    fn model() -> crate::model_zoo::Model {
        build_model(
            &EncoderSpec::tiny(16, 9),
            &HeadSpec::Projector(ProjectorSpec { layers: 3, width: 8 }),
            4,
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.archive");
        let m = model();
        save_archive(&m, &path, "synthetic").unwrap();
        let mut other = build_model(
            &EncoderSpec::tiny(16, 1),
            &HeadSpec::Projector(ProjectorSpec { layers: 3, width: 8 }),
            0,
        )
        .unwrap();
        let report = load_archive(&path, &mut other).unwrap();
        assert_eq!(report.loaded, m.tensor_names().len());
        assert!(report.unused.is_empty());
        assert_eq!(WeightArchive::from_module(&other, "synthetic"), WeightArchive::from_module(&m, "synthetic"));
        assert_eq!(WeightArchive::read(&path).unwrap().provenance(), Some("synthetic"));
    }

    #[test]
    fn payload_accounting() {
        let m = model();
        let a = WeightArchive::from_module(&m, "x");
        let mut expected = 0usize;
        m.visit("", &mut |_, p| expected += p.shape.iter().product::<usize>() * 4);
        let bytes = a.to_bytes();
        let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        assert_eq!(bytes.len() - 8 - hlen, expected);
        assert_eq!(a.payload_len(), expected);
    }

    #[test]
    fn missing_tensor_is_named() {
        let m = model();
        let mut a = WeightArchive::from_module(&m, "x");
        a.remove("encoder.stage2.conv.weight");
        let mut target = model();
        match a.apply(&mut target, "") {
            Err(ArchiveError::MissingTensors(names)) => {
                assert_eq!(names, vec!["encoder.stage2.conv.weight".to_string()])
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        assert!(matches!(WeightArchive::from_bytes(&[1, 2, 3]), Err(ArchiveError::CorruptHeader(_))));
        let mut bytes = WeightArchive::from_module(&model(), "x").to_bytes();
        bytes[9] = b'!';
        assert!(matches!(WeightArchive::from_bytes(&bytes), Err(ArchiveError::CorruptHeader(_))));
        let mut big = 1_000_000u64.to_le_bytes().to_vec();
        big.extend_from_slice(b"{}");
        assert!(WeightArchive::from_bytes(&big).is_err());
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let a = WeightArchive::from_module(&model(), "x");
        let mut wide = build_model(
            &EncoderSpec::tiny(32, 9),
            &HeadSpec::Projector(ProjectorSpec { layers: 3, width: 8 }),
            4,
        )
        .unwrap();
        assert!(matches!(a.apply(&mut wide, ""), Err(ArchiveError::ShapeMismatch { .. })));
    }
}
