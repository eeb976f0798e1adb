//! Binary tensor container used for every model and dataset file.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "LORS" | version: u32 | manifest_len: u64 | manifest (UTF-8 JSON) | payload
//! ```
//!
//! The manifest is a list of `{name, shape, dtype, offset}` records; `offset`
//! is the byte position of the tensor inside the payload, and values are
//! row-major IEEE-754 `f64`.
//!
//! Tensor names used for models and datasets:
//!
//! | name                  | shape | meaning                                   |
//! |-----------------------|-------|-------------------------------------------|
//! | `meta.classes`        | 1×1   | class count, 0 for a regression head      |
//! | `layers.{i}.weight`   | R×C   | (merged) weight                           |
//! | `layers.{i}.mask`     | R×C   | 0/1 sparsity pattern                      |
//! | `layers.{i}.sparsity` | 1×2   | `[kind, ratio]`; kind 0 dense, 1 unstructured, 2 two-four |
//! | `layers.{i}.bias`     | R×1   | optional                                  |
//! | `layers.{i}.lora_A`   | R×r   | low-rank adapter factors (optional)       |
//! | `layers.{i}.lora_B`   | r×C   |                                           |
//! | `layers.{i}.spp_A`    | R×r   | SPP adapter factors (optional)            |
//! | `layers.{i}.spp_B`    | 1×C   |                                           |
//! | `data.x`              | C×L   | inputs, one column per sample             |
//! | `data.y`              | K×L   | regression targets                        |
//! | `data.labels`         | 1×L   | class labels                              |

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapters::Adapter;
use crate::error::{LorsError, Result};
use crate::prune::{mask_violations, SparseWeight, Sparsity};
use crate::tensor::DenseMatrix;
use crate::train::{BaseLayer, BaseModel, Dataset, Head, Target, ToyModel};

pub const MAGIC: &[u8; 4] = b"LORS";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE: &str = "f64";
const HEADER_LEN: usize = 4 + 4 + 8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub dtype: String,
    pub offset: u64,
}

impl ManifestEntry {
    fn byte_len(&self) -> Option<u64> {
        (self.shape[0] as u64).checked_mul(self.shape[1] as u64)?.checked_mul(8)
    }
}

/// Named tensors in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    tensors: Vec<(String, DenseMatrix)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds `name`, replacing any tensor already stored under it.
    pub fn insert(&mut self, name: impl Into<String>, tensor: DenseMatrix) {
        let name = name.into();
        match self.tensors.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = tensor,
            None => self.tensors.push((name, tensor)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&DenseMatrix> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&DenseMatrix> {
        self.get(name).ok_or_else(|| LorsError::Format(format!("checkpoint has no tensor {name:?}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.get(name).is_some()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Records as they would be written, packed back to back.
    pub fn manifest(&self) -> Vec<ManifestEntry> {
        let mut offset = 0u64;
        self.tensors
            .iter()
            .map(|(name, t)| {
                let e = ManifestEntry { name: name.clone(), shape: [t.rows(), t.cols()], dtype: DTYPE.into(), offset };
                offset += 8 * t.len() as u64;
                e
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_vec(&self.manifest())?;
        let payload: usize = self.tensors.iter().map(|(_, t)| 8 * t.len()).sum();
        let mut out = Vec::with_capacity(HEADER_LEN + manifest.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: String| LorsError::Format(msg);
        if bytes.len() < HEADER_LEN {
            return Err(bad(format!("file is {} bytes, shorter than the header", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(bad(format!("bad magic {:?}", &bytes[..4])));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let payload_start = (HEADER_LEN as u64)
            .checked_add(manifest_len)
            .filter(|&end| end <= bytes.len() as u64)
            .ok_or_else(|| bad(format!("manifest length {manifest_len} runs past the end of the file")))?
            as usize;
        let entries: Vec<ManifestEntry> = serde_json::from_slice(&bytes[HEADER_LEN..payload_start])
            .map_err(|e| bad(format!("manifest is not valid JSON: {e}")))?;
        let payload = &bytes[payload_start..];

        let mut seen = HashSet::new();
        let mut spans = Vec::with_capacity(entries.len());
        for e in &entries {
            if e.dtype != DTYPE {
                return Err(bad(format!("tensor {:?} has unsupported dtype {:?}", e.name, e.dtype)));
            }
            if !seen.insert(e.name.as_str()) {
                return Err(bad(format!("duplicate tensor name {:?}", e.name)));
            }
            let end = e
                .byte_len()
                .and_then(|n| e.offset.checked_add(n))
                .filter(|&end| end <= payload.len() as u64)
                .ok_or_else(|| bad(format!("tensor {:?} lies outside the {}-byte payload", e.name, payload.len())))?;
            spans.push((e.offset, end, e.name.as_str()));
        }
        spans.sort_unstable();
        for w in spans.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(bad(format!("tensors {:?} and {:?} overlap", w[0].2, w[1].2)));
            }
        }

        let tensors = entries
            .iter()
            .map(|e| {
                let start = e.offset as usize;
                let n = e.shape[0] * e.shape[1];
                let data = payload[start..start + 8 * n]
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                let t = DenseMatrix::new(e.shape[0], e.shape[1], data).map_err(|err| bad(format!("tensor {:?}: {err}", e.name)))?;
                Ok((e.name.clone(), t))
            })
            .collect::<Result<_>>()?;
        Ok(Self { tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        f.sync_all()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn from_model(model: &BaseModel) -> Self {
        let mut ck = Self::new();
        ck.insert_model(model);
        ck
    }

    pub fn insert_model(&mut self, model: &BaseModel) {
        let classes = match model.head {
            Head::Regression => 0,
            Head::Classification { classes } => classes,
        };
        self.insert("meta.classes", DenseMatrix::filled(1, 1, classes as f64));
        for (i, l) in model.layers.iter().enumerate() {
            self.insert(format!("layers.{i}.weight"), l.weight.values().clone());
            self.insert(format!("layers.{i}.mask"), l.weight.mask());
            let (kind, ratio) = match l.weight.sparsity() {
                Sparsity::Dense => (0.0, 0.0),
                Sparsity::Unstructured { ratio } => (1.0, ratio),
                Sparsity::TwoFour => (2.0, 0.5),
            };
            self.insert(format!("layers.{i}.sparsity"), DenseMatrix::from_rows(&[&[kind, ratio]]));
            if let Some(b) = &l.bias {
                self.insert(format!("layers.{i}.bias"), b.clone());
            }
        }
    }

    /// Merged weights plus the raw adapter factors of every layer.
    pub fn from_adapted(model: &ToyModel) -> Result<Self> {
        let mut ck = Self::from_model(&model.merged()?);
        for (i, l) in model.layers().iter().enumerate() {
            let prefix = match l.adapter() {
                Adapter::LowRank(_) => "lora",
                Adapter::Spp(_) => "spp",
            };
            let (a, b) = l.adapter().factors();
            ck.insert(format!("layers.{i}.{prefix}_A"), a.clone());
            ck.insert(format!("layers.{i}.{prefix}_B"), b.clone());
        }
        Ok(ck)
    }

    pub fn to_model(&self) -> Result<BaseModel> {
        let classes = self.get("meta.classes").map(|m| m.get(0, 0)).unwrap_or(0.0);
        let head = match as_count(classes, "meta.classes")? {
            0 => Head::Regression,
            classes => Head::Classification { classes },
        };
        let mut layers = Vec::new();
        while let Some(w) = self.get(&format!("layers.{}.weight", layers.len())) {
            let i = layers.len();
            if let Some(mask) = self.get(&format!("layers.{i}.mask")) {
                if mask.shape() != w.shape() || mask_violations(w, mask) != 0 {
                    return Err(LorsError::Format(format!("layers.{i}.weight has nonzeros outside layers.{i}.mask")));
                }
            }
            let sparsity = match self.get(&format!("layers.{i}.sparsity")).map(|s| s.data().to_vec()).as_deref() {
                None | Some([0.0, _]) => Sparsity::Dense,
                Some([1.0, ratio]) => Sparsity::Unstructured { ratio: *ratio },
                Some([2.0, _]) => Sparsity::TwoFour,
                Some(other) => return Err(LorsError::Format(format!("layers.{i}.sparsity has unknown value {other:?}"))),
            };
            let bias = self.get(&format!("layers.{i}.bias")).cloned();
            layers.push(BaseLayer { weight: SparseWeight::new(w.clone(), sparsity), bias });
        }
        if layers.is_empty() {
            return Err(LorsError::Format("checkpoint holds no layers.0.weight".into()));
        }
        BaseModel::new(layers, head).map_err(|e| LorsError::Format(e.to_string()))
    }

    pub fn from_dataset(data: &Dataset) -> Self {
        let mut ck = Self::new();
        ck.insert_dataset(data);
        ck
    }

    pub fn insert_dataset(&mut self, data: &Dataset) {
        let all = data.all();
        self.insert("data.x", all.x.clone());
        match &all.target {
            Target::Regression(y) => self.insert("data.y", y.clone()),
            Target::Classes(c) => {
                self.insert("data.labels", DenseMatrix::from_fn(1, c.len(), |_, j| c[j] as f64));
            }
        }
    }

    pub fn to_dataset(&self) -> Result<Dataset> {
        let x = self.require("data.x")?.clone();
        let target = match (self.get("data.y"), self.get("data.labels")) {
            (Some(y), None) => Target::Regression(y.clone()),
            (None, Some(l)) => Target::Classes(l.data().iter().map(|&v| as_count(v, "data.labels")).collect::<Result<_>>()?),
            _ => return Err(LorsError::Format("checkpoint needs exactly one of data.y and data.labels".into())),
        };
        Dataset::new(x, target).map_err(|e| LorsError::Format(e.to_string()))
    }
}

fn as_count(v: f64, name: &str) -> Result<usize> {
    if v >= 0.0 && v.fract() == 0.0 && v < u32::MAX as f64 {
        Ok(v as usize)
    } else {
        Err(LorsError::Format(format!("{name} holds {v}, expected a non-negative integer")))
    }
}
