//! Portable checkpoint container.
//!
//! ```text
//! offset  size  field
//! 0       8     magic "MPMCKPT\0"
//! 8       4     format version, u32 little-endian
//! 12      8     manifest length N in bytes, u64 little-endian
//! 20      N     manifest, UTF-8 JSON
//! 20+N    ...   payload: every tensor as contiguous little-endian f32
//! ```
//!
//! The manifest holds the model configuration, training metadata, the
//! codebook supports and a tensor index of `{name, shape, dtype, offset,
//! len}` where `offset` and `len` count bytes from the start of the payload.
//! Codebook edges are stored as tensors named `codebook.<stream>.edges`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{MpmConfig, MpmModel, STREAMS};
use crate::codec::{Codebook, Codebooks};
use crate::error::{Error, Result};
use crate::mask::MaskConfig;
use crate::nn::ParamStore;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MPMCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub steps_completed: usize,
    pub final_loss: Option<f64>,
    pub seed: u64,
    pub mask: Option<MaskConfig>,
    /// Free-form notes, e.g. deviations from the reference regime.
    pub notes: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct MpmCheckpoint {
    pub model: MpmModel<f32>,
    pub metadata: TrainingMetadata,
    pub codebooks: Codebooks,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
    len: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CodebookSupport {
    size: usize,
    lower: f64,
    upper: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config: MpmConfig,
    metadata: TrainingMetadata,
    codebooks: Vec<CodebookSupport>,
    tensors: Vec<TensorEntry>,
}

fn codebook_list(cb: &Codebooks) -> [&Codebook; 3] {
    [&cb.pitch, &cb.energy, &cb.vad]
}

impl MpmCheckpoint {
    pub fn new(model: MpmModel<f32>, metadata: TrainingMetadata, codebooks: Codebooks) -> Result<Self> {
        if codebooks.sizes() != model.config().codebook_sizes {
            return Err(Error::Checkpoint(format!(
                "codebook sizes {:?} do not match model {:?}",
                codebooks.sizes(),
                model.config().codebook_sizes
            )));
        }
        Ok(MpmCheckpoint { model, metadata, codebooks })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let mut payload: Vec<u8> = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, values: &mut dyn Iterator<Item = f32>| {
            let offset = payload.len() as u64;
            for v in values {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            tensors.push(TensorEntry {
                name,
                shape,
                dtype: "f32".into(),
                offset,
                len: payload.len() as u64 - offset,
            });
        };
        for e in self.model.params().entries() {
            push(e.name.clone(), e.shape.clone(), &mut e.value.iter().copied());
        }
        for (s, cb) in codebook_list(&self.codebooks).into_iter().enumerate() {
            push(
                format!("codebook.{}.edges", STREAMS[s]),
                vec![cb.edges().len()],
                &mut cb.edges().iter().map(|v| *v as f32),
            );
        }
        let manifest = Manifest {
            format_version: CHECKPOINT_VERSION,
            config: self.model.config().clone(),
            metadata: self.metadata.clone(),
            codebooks: codebook_list(&self.codebooks)
                .into_iter()
                .map(|cb| CodebookSupport { size: cb.size(), lower: cb.lower(), upper: cb.upper() })
                .collect(),
            tensors,
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(HEADER_LEN + json.len() + payload.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_string());
        if bytes.len() < HEADER_LEN || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("missing checkpoint magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let mlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let payload_start = HEADER_LEN.checked_add(mlen).filter(|e| *e <= bytes.len()).ok_or_else(|| bad("truncated manifest"))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[HEADER_LEN..payload_start])?;
        let payload = &bytes[payload_start..];

        let mut store = ParamStore::<f32>::new();
        let mut edges: [Option<Vec<f32>>; 3] = Default::default();
        for t in &manifest.tensors {
            if t.dtype != "f32" {
                return Err(Error::Checkpoint(format!("tensor `{}` has dtype {}", t.name, t.dtype)));
            }
            let (start, len) = (t.offset as usize, t.len as usize);
            let numel: usize = t.shape.iter().product();
            if len != numel * 4 || start.checked_add(len).is_none_or(|e| e > payload.len()) {
                return Err(Error::Checkpoint(format!("tensor `{}` is out of bounds", t.name)));
            }
            let values: Vec<f32> = payload[start..start + len]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            if let Some(s) = STREAMS.iter().position(|s| t.name == format!("codebook.{s}.edges")) {
                edges[s] = Some(values);
            } else {
                store.add(t.name.clone(), t.shape.clone(), values);
            }
        }
        if manifest.codebooks.len() != 3 {
            return Err(bad("expected three codebooks"));
        }
        let mut books = Vec::with_capacity(3);
        for (s, sup) in manifest.codebooks.iter().enumerate() {
            let cb = Codebook::new(sup.size, sup.lower, sup.upper)?;
            let stored = edges[s].as_ref().ok_or_else(|| bad("codebook edges missing"))?;
            if stored.len() != cb.edges().len() || stored.iter().zip(cb.edges()).any(|(a, b)| *a != *b as f32) {
                return Err(Error::Checkpoint(format!("{} codebook edges disagree with its support", STREAMS[s])));
            }
            books.push(cb);
        }
        let [pitch, energy, vad]: [Codebook; 3] = books.try_into().expect("three codebooks");
        let model = MpmModel::from_params(manifest.config, &store)?;
        MpmCheckpoint::new(model, manifest.metadata, Codebooks { pitch, energy, vad })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
