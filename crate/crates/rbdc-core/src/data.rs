//! Deterministic synthetic classification data, an IDX-format parser
//! for MNIST-style files, and a binary cache for generated tasks.
//!
//! The synthetic task draws one fixed Gaussian pattern per class and
//! adds unit noise per sample; train and eval splits use disjoint
//! noise streams, so they never share a sample.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed, standard_normal_vec};
use crate::tensor::{Precision, Tensor};

/// Which side of the train/eval boundary a dataset sits on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

/// A fixed-shape labeled dataset. Samples are stored as one packed
/// tensor of shape `(n, input_shape...)` at 64-bit precision; batches
/// are materialized at the precision a training run asks for.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub split: Split,
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
    samples: Tensor,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(
        split: Split,
        input_shape: Vec<usize>,
        num_classes: usize,
        samples: Tensor,
        labels: Vec<usize>,
    ) -> Result<Dataset> {
        if num_classes < 2 {
            return Err(Error::Domain { detail: "a classification dataset needs at least 2 classes".into() });
        }
        let expected_first = labels.len();
        let mut want = vec![expected_first];
        want.extend_from_slice(&input_shape);
        if samples.shape() != want.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "dataset",
                detail: format!("samples shaped {:?}, expected {:?}", samples.shape(), want),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Domain {
                detail: format!("label {bad} out of range for {num_classes} classes"),
            });
        }
        Ok(Dataset { split, input_shape, num_classes, samples, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn samples(&self) -> &Tensor {
        &self.samples
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn sample_dim(&self) -> usize {
        self.input_shape.iter().product()
    }

    /// Gather the rows at `indices` into a batch tensor of the given
    /// precision, together with their labels.
    pub fn batch(&self, indices: &[usize], precision: Precision) -> Result<(Tensor, Vec<usize>)> {
        let dim = self.sample_dim();
        let mut data = Vec::with_capacity(indices.len() * dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Domain { detail: format!("sample index {i} out of range ({})", self.len()) });
            }
            data.extend_from_slice(&self.samples.data()[i * dim..(i + 1) * dim]);
            labels.push(self.labels[i]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.input_shape);
        Ok((Tensor::new(shape, data, precision)?, labels))
    }
}

/// A train/eval pair over the same classes and input shape.
#[derive(Clone, Debug)]
pub struct TaskData {
    pub train: Dataset,
    pub eval: Dataset,
}

/// Noise scale added on top of the class pattern.
pub const SYNTH_NOISE_STD: f64 = 1.0;

/// Generate a balanced class-conditional Gaussian task: one fixed
/// pattern per class (unit-normal entries) plus unit noise per sample.
/// Fully determined by `seed`; the train and eval splits draw noise
/// from disjoint streams.
pub fn gen_synthetic(
    num_classes: usize,
    per_class_train: usize,
    per_class_eval: usize,
    input_shape: &[usize],
    seed: u64,
) -> Result<TaskData> {
    if num_classes < 2 || per_class_train == 0 || per_class_eval == 0 {
        return Err(Error::Domain {
            detail: "need at least 2 classes and positive per-class counts".into(),
        });
    }
    if input_shape.is_empty() || input_shape.iter().any(|&d| d == 0) {
        return Err(Error::Domain { detail: format!("degenerate input shape {input_shape:?}") });
    }
    let dim: usize = input_shape.iter().product();
    let mut means_rng = rng_from_seed(derive_seed(seed, "means"));
    let means: Vec<Vec<f64>> = (0..num_classes).map(|_| standard_normal_vec(&mut means_rng, dim)).collect();

    let make_split = |split: Split, per_class: usize| -> Result<Dataset> {
        let mut rng = rng_from_seed(derive_seed(seed, split.as_str()));
        let n = num_classes * per_class;
        let mut data = Vec::with_capacity(n * dim);
        let mut labels = Vec::with_capacity(n);
        for class in 0..num_classes {
            for _ in 0..per_class {
                let noise = standard_normal_vec(&mut rng, dim);
                data.extend(means[class].iter().zip(&noise).map(|(m, z)| m + SYNTH_NOISE_STD * z));
                labels.push(class);
            }
        }
        let mut shape = vec![n];
        shape.extend_from_slice(input_shape);
        Dataset::new(split, input_shape.to_vec(), num_classes, Tensor::new(shape, data, Precision::F64)?, labels)
    };

    Ok(TaskData {
        train: make_split(Split::Train, per_class_train)?,
        eval: make_split(Split::Eval, per_class_eval)?,
    })
}

// ── IDX format ──────────────────────────────────────────────────────

/// Parsed IDX payload: images scaled to [0, 1], or exact labels.
#[derive(Clone, Debug)]
pub enum IdxContent {
    Images(Tensor),
    Labels(Vec<usize>),
}

/// Parse result; `trailing_bytes` is nonzero when the file carries
/// data past the declared payload (reported, never silently read).
#[derive(Clone, Debug)]
pub struct IdxParse {
    pub content: IdxContent,
    pub trailing_bytes: usize,
}

const IDX_UNSIGNED_BYTE: u8 = 0x08;

/// Parse an IDX byte stream: magic `00 00 <type> <ndims>`, big-endian
/// u32 sizes, then the payload. One dimension means labels; more mean
/// an image stack whose u8 values are scaled to [0, 1].
pub fn parse_idx(bytes: &[u8]) -> Result<IdxParse> {
    let fail = |offset: usize, detail: &str| Error::Format {
        record: None,
        detail: format!("idx byte {offset}: {detail}"),
    };
    if bytes.len() < 4 {
        return Err(fail(bytes.len(), "truncated magic"));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(fail(0, "magic must start with two zero bytes"));
    }
    if bytes[2] != IDX_UNSIGNED_BYTE {
        return Err(fail(2, &format!("unsupported type code 0x{:02x} (only 0x08 unsigned byte)", bytes[2])));
    }
    let ndims = bytes[3] as usize;
    if ndims == 0 {
        return Err(fail(3, "dimension count must be positive"));
    }
    let header_len = 4 + 4 * ndims;
    if bytes.len() < header_len {
        return Err(fail(bytes.len(), "truncated dimension table"));
    }
    let mut dims = Vec::with_capacity(ndims);
    for d in 0..ndims {
        let off = 4 + 4 * d;
        let size = u32::from_be_bytes(bytes[off..off + 4].try_into().expect("4 bytes")) as usize;
        dims.push(size);
    }
    let payload: usize = dims.iter().product();
    if bytes.len() < header_len + payload {
        return Err(fail(bytes.len(), &format!("payload needs {} bytes, file ends early", payload)));
    }
    let trailing_bytes = bytes.len() - header_len - payload;
    let raw = &bytes[header_len..header_len + payload];
    let content = if ndims == 1 {
        IdxContent::Labels(raw.iter().map(|&b| b as usize).collect())
    } else {
        let data: Vec<f64> = raw.iter().map(|&b| b as f64 / 255.0).collect();
        IdxContent::Images(Tensor::new(dims, data, Precision::F64)?)
    };
    Ok(IdxParse { content, trailing_bytes })
}

/// Serialize an image tensor to IDX, quantizing [0, 1] values to u8.
pub fn serialize_idx_images(images: &Tensor) -> Result<Vec<u8>> {
    if images.shape().len() < 2 {
        return Err(Error::Domain { detail: "image stack needs at least 2 dimensions".into() });
    }
    let mut out = idx_header(IDX_UNSIGNED_BYTE, images.shape())?;
    for &v in images.data() {
        let q = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        out.push(q);
    }
    Ok(out)
}

/// Serialize labels to a 1-D IDX file.
pub fn serialize_idx_labels(labels: &[usize]) -> Result<Vec<u8>> {
    if let Some(&bad) = labels.iter().find(|&&l| l > 255) {
        return Err(Error::Domain { detail: format!("label {bad} does not fit the unsigned-byte type") });
    }
    let mut out = idx_header(IDX_UNSIGNED_BYTE, &[labels.len()])?;
    out.extend(labels.iter().map(|&l| l as u8));
    Ok(out)
}

fn idx_header(type_code: u8, dims: &[usize]) -> Result<Vec<u8>> {
    if dims.len() > 255 {
        return Err(Error::Domain { detail: "too many dimensions for idx".into() });
    }
    let mut out = vec![0u8, 0, type_code, dims.len() as u8];
    for &d in dims {
        let d32 = u32::try_from(d).map_err(|_| Error::Domain { detail: format!("dimension {d} exceeds u32") })?;
        out.extend_from_slice(&d32.to_be_bytes());
    }
    Ok(out)
}

// ── task cache ──────────────────────────────────────────────────────

pub const DATA_MAGIC: &[u8; 8] = b"RBDCDATA";
pub const DATA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct DataManifest {
    num_classes: usize,
    input_shape: Vec<usize>,
    train_count: usize,
    eval_count: usize,
}

impl TaskData {
    /// Encode both splits into one cache blob: header, JSON manifest,
    /// then raw little-endian samples and labels per split.
    pub fn encode(&self) -> Result<Vec<u8>> {
        if self.train.input_shape != self.eval.input_shape || self.train.num_classes != self.eval.num_classes {
            return Err(Error::Incompatible { detail: "train and eval splits disagree on shape or classes".into() });
        }
        let manifest = DataManifest {
            num_classes: self.train.num_classes,
            input_shape: self.train.input_shape.clone(),
            train_count: self.train.len(),
            eval_count: self.eval.len(),
        };
        let json = crate::checkpoint::canonical_json(&manifest)?;
        let mut out = Vec::new();
        out.extend_from_slice(DATA_MAGIC);
        out.extend_from_slice(&DATA_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(json.as_bytes());
        for ds in [&self.train, &self.eval] {
            for &v in ds.samples().data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for &l in ds.labels() {
                out.extend_from_slice(&(l as u64).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<TaskData> {
        if bytes.len() < 20 || &bytes[0..8] != DATA_MAGIC {
            return Err(Error::Format { record: None, detail: "not a task cache file".into() });
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != DATA_VERSION {
            return Err(Error::Format {
                record: None,
                detail: format!("unsupported cache version {version}"),
            });
        }
        let mlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        if 20 + mlen > bytes.len() {
            return Err(Error::Format { record: None, detail: "manifest length exceeds file".into() });
        }
        let manifest: DataManifest = serde_json::from_slice(&bytes[20..20 + mlen])?;
        let dim: usize = manifest.input_shape.iter().product();
        let mut cursor = 20 + mlen;
        let mut read_split = |split: Split, count: usize| -> Result<Dataset> {
            let sample_bytes = count * dim * 8;
            let label_bytes = count * 8;
            if cursor + sample_bytes + label_bytes > bytes.len() {
                return Err(Error::Format {
                    record: None,
                    detail: format!("{} split payload truncated", split.as_str()),
                });
            }
            let data: Vec<f64> = bytes[cursor..cursor + sample_bytes]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            cursor += sample_bytes;
            let labels: Vec<usize> = bytes[cursor..cursor + label_bytes]
                .chunks_exact(8)
                .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")) as usize)
                .collect();
            cursor += label_bytes;
            let mut shape = vec![count];
            shape.extend_from_slice(&manifest.input_shape);
            Dataset::new(
                split,
                manifest.input_shape.clone(),
                manifest.num_classes,
                Tensor::new(shape, data, Precision::F64)?,
                labels,
            )
        };
        let train = read_split(Split::Train, manifest.train_count)?;
        let eval = read_split(Split::Eval, manifest.eval_count)?;
        Ok(TaskData { train, eval })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        let dir = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => std::path::PathBuf::from("."),
        };
        let mut tmp = tempfile::NamedTempFile::new_in(&dir)?;
        tmp.write_all(&bytes)?;
        tmp.flush()?;
        tmp.persist(path)
            .map_err(|e| Error::Io { detail: format!("renaming into `{}`: {}", path.display(), e.error) })?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<TaskData> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Io { detail: format!("reading `{}`: {}", path.display(), e) })?;
        TaskData::decode(&bytes)
    }
}
