//! Bit-exact checkpoint files: the exchange currency between training
//! phases.
//!
//! Layout of a checkpoint file:
//!
//! ```text
//! bytes 0..8    magic "RBDCCKPT"
//! bytes 8..12   format version, u32 little-endian (currently 1)
//! bytes 12..20  manifest length in bytes, u64 little-endian
//! manifest      UTF-8 JSON: spec, metadata, tensor records (sorted keys)
//! blob          raw little-endian scalars, one contiguous range per record
//! ```
//!
//! The manifest is canonicalized (sorted object keys, compact encoding),
//! so saving the same model twice produces byte-identical files. Writes
//! go through a temp file in the target directory and are renamed into
//! place, so readers never observe a partial file.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Precision, Tensor};
use crate::zoo::{param_layout, LayerRole, Model, ModelSpec, Param};

pub const MAGIC: &[u8; 8] = b"RBDCCKPT";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 8;

/// Provenance tree of a checkpoint: leaves are models trained from
/// scratch, interior nodes are couplings of exactly two children.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lineage {
    pub label: String,
    pub width: usize,
    pub seed: u64,
    pub epochs_trained: u64,
    #[serde(default)]
    pub children: Vec<Lineage>,
}

impl Lineage {
    pub fn leaf(label: impl Into<String>, width: usize, seed: u64, epochs_trained: u64) -> Lineage {
        Lineage { label: label.into(), width, seed, epochs_trained, children: Vec::new() }
    }

    pub fn coupled(
        label: impl Into<String>,
        width: usize,
        seed: u64,
        epochs_trained: u64,
        left: Lineage,
        right: Lineage,
    ) -> Lineage {
        Lineage { label: label.into(), width, seed, epochs_trained, children: vec![left, right] }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.children.is_empty() && self.children.len() != 2 {
            return Err(Error::Format {
                record: None,
                detail: format!("lineage node `{}` has {} children; expected 0 or 2", self.label, self.children.len()),
            });
        }
        for child in &self.children {
            child.validate()?;
        }
        Ok(())
    }

    /// Depth of the coupling tree (0 for a scratch-trained leaf).
    pub fn coupling_depth(&self) -> usize {
        self.children.iter().map(|c| 1 + c.coupling_depth()).max().unwrap_or(0)
    }
}

/// Training provenance stored alongside the tensors.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Metadata {
    pub seed: u64,
    pub epochs_trained: u64,
    pub bn_batches_tracked: u64,
    pub lineage: Lineage,
}

/// One tensor's entry in the manifest. Roles and precisions are kept
/// as strings in the file so a bad tag can be reported by record name.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    role: String,
    shape: Vec<usize>,
    precision: String,
    byte_offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    spec: ModelSpec,
    metadata: Metadata,
    records: Vec<TensorRecord>,
}

/// In-memory checkpoint: spec, provenance, and decoded parameters in
/// canonical layout order.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub metadata: Metadata,
    pub params: Vec<Param>,
}

/// Serialize any value as compact JSON with sorted object keys.
pub fn canonical_json<T: Serialize>(value: &T) -> Result<String> {
    // Round-tripping through Value sorts keys (its map is ordered).
    let v = serde_json::to_value(value)?;
    Ok(serde_json::to_string(&v)?)
}

impl Checkpoint {
    pub fn from_model(model: &Model, seed: u64, epochs_trained: u64, lineage: Lineage) -> Checkpoint {
        Checkpoint {
            spec: model.spec.clone(),
            metadata: Metadata {
                seed,
                epochs_trained,
                bn_batches_tracked: model.bn_batches_tracked,
                lineage,
            },
            params: model.params().to_vec(),
        }
    }

    pub fn precision(&self) -> Result<Precision> {
        let first = self.params.first().ok_or_else(|| Error::State {
            detail: "checkpoint holds no parameters".into(),
        })?;
        Ok(first.tensor.precision())
    }

    /// Rebuild a runnable model; validates the parameter set against the
    /// canonical layout of the spec.
    pub fn to_model(&self) -> Result<Model> {
        Model::from_params(
            self.spec.clone(),
            self.precision()?,
            self.params.clone(),
            self.metadata.bn_batches_tracked,
        )
    }

    pub fn num_scalar_params(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Encode to the on-disk byte layout.
    pub fn encode(&self) -> Result<Vec<u8>> {
        self.metadata.lineage.validate()?;
        let mut blob: Vec<u8> = Vec::new();
        let mut records = Vec::with_capacity(self.params.len());
        for p in &self.params {
            let byte_offset = blob.len() as u64;
            match p.tensor.precision() {
                Precision::F32 => {
                    for &v in p.tensor.data() {
                        blob.extend_from_slice(&(v as f32).to_le_bytes());
                    }
                }
                Precision::F64 => {
                    for &v in p.tensor.data() {
                        blob.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
            records.push(TensorRecord {
                name: p.name.clone(),
                role: p.role.as_str().to_string(),
                shape: p.tensor.shape().to_vec(),
                precision: p.tensor.precision().as_str().to_string(),
                byte_offset,
            });
        }
        let manifest = Manifest { spec: self.spec.clone(), metadata: self.metadata.clone(), records };
        let json = canonical_json(&manifest)?;
        let mut out = Vec::with_capacity(HEADER_LEN + json.len() + blob.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(json.as_bytes());
        out.extend_from_slice(&blob);
        Ok(out)
    }

    /// Decode from the on-disk byte layout, validating the manifest
    /// against the spec's canonical parameter layout.
    pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Format { record: None, detail: "file shorter than the fixed header".into() });
        }
        if &bytes[0..8] != MAGIC {
            return Err(Error::Format { record: None, detail: "bad magic; not a checkpoint file".into() });
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Format {
                record: None,
                detail: format!("unsupported format version {version}; this build reads version {VERSION}"),
            });
        }
        let manifest_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let blob_start = HEADER_LEN.checked_add(manifest_len).ok_or_else(|| Error::Format {
            record: None,
            detail: "manifest length overflows".into(),
        })?;
        if blob_start > bytes.len() {
            return Err(Error::Format {
                record: None,
                detail: format!(
                    "manifest length {} exceeds file size {}",
                    manifest_len,
                    bytes.len()
                ),
            });
        }
        let manifest: Manifest = serde_json::from_slice(&bytes[HEADER_LEN..blob_start])
            .map_err(|e| Error::Format { record: None, detail: format!("manifest is not valid JSON: {e}") })?;
        manifest.metadata.lineage.validate()?;
        let blob = &bytes[blob_start..];

        let defs = param_layout(&manifest.spec)?;
        if defs.len() != manifest.records.len() {
            return Err(Error::Format {
                record: None,
                detail: format!("manifest lists {} records, spec layout has {}", manifest.records.len(), defs.len()),
            });
        }
        let mut seen = HashSet::new();
        let mut ranges: Vec<(u64, u64, &str)> = Vec::with_capacity(manifest.records.len());
        let mut params = Vec::with_capacity(manifest.records.len());
        for (def, rec) in defs.iter().zip(&manifest.records) {
            let fail = |detail: String| Error::Format { record: Some(rec.name.clone()), detail };
            if !seen.insert(rec.name.clone()) {
                return Err(fail("duplicate record name".into()));
            }
            if rec.name != def.name {
                return Err(fail(format!("out of layout order; expected `{}` here", def.name)));
            }
            let role = LayerRole::from_str_tag(&rec.role)
                .ok_or_else(|| fail(format!("unknown role string `{}`", rec.role)))?;
            if role != def.role {
                return Err(fail(format!("role {} does not match layout role {}", rec.role, def.role.as_str())));
            }
            if rec.shape != def.shape {
                return Err(fail(format!("shape {:?} does not match layout shape {:?}", rec.shape, def.shape)));
            }
            let precision = Precision::from_str_tag(&rec.precision)
                .ok_or_else(|| fail(format!("unknown precision tag `{}`", rec.precision)))?;
            let numel: usize = rec.shape.iter().product();
            let len = (numel * precision.bytes()) as u64;
            let end = rec.byte_offset.checked_add(len).ok_or_else(|| fail("byte range overflows".into()))?;
            if end > blob.len() as u64 {
                return Err(fail(format!(
                    "byte range {}..{} exceeds blob length {}",
                    rec.byte_offset,
                    end,
                    blob.len()
                )));
            }
            ranges.push((rec.byte_offset, end, &rec.name));
            let raw = &blob[rec.byte_offset as usize..end as usize];
            let data: Vec<f64> = match precision {
                Precision::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                    .collect(),
                Precision::F64 => raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            };
            let tensor = Tensor::new(rec.shape.clone(), data, precision)
                .map_err(|e| Error::Format { record: Some(rec.name.clone()), detail: format!("{e}") })?;
            params.push(Param { name: rec.name.clone(), role, tensor, trainable: def.trainable });
        }
        ranges.sort_by_key(|r| r.0);
        for pair in ranges.windows(2) {
            if pair[0].1 > pair[1].0 {
                return Err(Error::Format {
                    record: Some(pair[1].2.to_string()),
                    detail: format!("byte range overlaps record `{}`", pair[0].2),
                });
            }
        }
        let precision = params[0].tensor.precision();
        if let Some(p) = params.iter().find(|p| p.tensor.precision() != precision) {
            return Err(Error::Format {
                record: Some(p.name.clone()),
                detail: "mixed precisions within one checkpoint".into(),
            });
        }
        Ok(Checkpoint { spec: manifest.spec, metadata: manifest.metadata, params })
    }

    /// Write atomically: encode, write to a temp file in the target
    /// directory, then rename over the destination.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        let dir = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => std::path::PathBuf::from("."),
        };
        let mut tmp = tempfile::NamedTempFile::new_in(&dir)?;
        tmp.write_all(&bytes)?;
        tmp.flush()?;
        tmp.persist(path).map_err(|e| Error::Io { detail: format!("renaming into `{}`: {}", path.display(), e.error) })?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Io { detail: format!("reading `{}`: {}", path.display(), e) })?;
        Checkpoint::decode(&bytes)
    }
}
