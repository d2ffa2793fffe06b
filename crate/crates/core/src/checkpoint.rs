//! Versioned single-file model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes   "VSTNCKPT"
//! version   u32       FORMAT_VERSION
//! length    u64       byte length of the manifest
//! manifest  JSON      backbone spec, decoder spec, training metadata and an
//!                     array table {name, shape, dtype, offset, len}
//! payload   f64 LE    arrays concatenated in table order
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{param_shapes, BackboneSpec, Model, TrainingMeta};
use crate::error::{Error, Result};
use crate::segmentation::DecoderSpec;
use crate::tape::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"VSTNCKPT";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE: &str = "f64-le";

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    /// Offset in bytes from the start of the payload.
    offset: u64,
    /// Number of elements.
    len: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    spec: BackboneSpec,
    decoder: Option<DecoderSpec>,
    meta: TrainingMeta,
    arrays: Vec<ArrayEntry>,
    payload_bytes: u64,
}

pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    let mut arrays = Vec::with_capacity(model.params().len());
    let mut offset = 0u64;
    for (name, t) in model.params().iter() {
        arrays.push(ArrayEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: DTYPE.into(),
            offset,
            len: t.len() as u64,
        });
        offset += 8 * t.len() as u64;
    }
    let manifest = Manifest {
        spec: *model.spec(),
        decoder: model.decoder().cloned(),
        meta: model.meta,
        arrays,
        payload_bytes: offset,
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| Error::CorruptManifest(e.to_string()))?;
    let mut out = Vec::with_capacity(20 + json.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in model.params().iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(Error::CorruptManifest("missing checkpoint header".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch { found: version, expected: FORMAT_VERSION });
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = &bytes[20..];
    if body.len() < len {
        return Err(Error::CorruptManifest("manifest truncated".into()));
    }
    let manifest: Manifest =
        serde_json::from_slice(&body[..len]).map_err(|e| Error::CorruptManifest(e.to_string()))?;
    let payload = &body[len..];
    if payload.len() as u64 != manifest.payload_bytes {
        return Err(Error::CorruptManifest(format!(
            "payload has {} bytes, manifest declares {}",
            payload.len(),
            manifest.payload_bytes
        )));
    }
    let mut params = ParamStore::new();
    for a in &manifest.arrays {
        if a.dtype != DTYPE {
            return Err(Error::CorruptManifest(format!("unsupported dtype {}", a.dtype)));
        }
        if a.shape.iter().product::<usize>() as u64 != a.len {
            return Err(Error::CorruptManifest(format!("{}: shape disagrees with length", a.name)));
        }
        let start = a.offset as usize;
        let end = start
            .checked_add(8 * a.len as usize)
            .filter(|&e| e <= payload.len())
            .ok_or_else(|| Error::CorruptManifest(format!("{}: array outside payload", a.name)))?;
        let data = payload[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.insert(a.name.clone(), Tensor::from_vec(&a.shape, data)?);
    }
    Model::from_parts(manifest.spec, manifest.decoder, params, manifest.meta)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

/// Loads a checkpoint and checks its arrays against the layout `expected` implies.
pub fn load_checkpoint_as(path: &Path, expected: &BackboneSpec) -> Result<Model> {
    let model = load_checkpoint(path)?;
    if let Some(d) = model.decoder() {
        d.validate(expected).map_err(|e| Error::ShapeMismatch(e.to_string()))?;
    }
    let want = param_shapes(expected, model.decoder());
    let have: Vec<(String, Vec<usize>)> =
        model.params().iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect();
    if want != have || model.spec().arch != expected.arch {
        let first = want
            .iter()
            .zip(&have)
            .find(|(a, b)| a != b)
            .map(|(a, b)| format!("expected {} {:?}, found {} {:?}", a.0, a.1, b.0, b.1))
            .unwrap_or_else(|| format!("expected {} arrays, found {}", want.len(), have.len()));
        return Err(Error::ShapeMismatch(first));
    }
    Ok(model)
}
