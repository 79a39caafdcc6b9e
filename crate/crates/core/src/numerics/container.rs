//! Binary tensor container and checkpoint directories.
//!
//! Container layout, little-endian throughout:
//!
//! ```text
//! "FMT1" | dtype u8 (0=f32, 1=f64, 2=u8) | rank u32 | rank x u32 extents | payload
//! ```
//!
//! A checkpoint is a directory holding one container per named tensor and a
//! `manifest.json` mapping each name to its file, shape and dtype, plus an
//! arbitrary JSON `config` section.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use super::value::{DType, TensorData, TensorValue};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FMT1";
/// Ranks above this are treated as corrupt headers.
pub const MAX_RANK: u32 = 16;

pub fn encode_tensor(t: &TensorValue) -> Result<Vec<u8>> {
    let rank = u32::try_from(t.shape().len()).map_err(|_| Error::Format("rank overflow".into()))?;
    if rank > MAX_RANK {
        return Err(Error::Format(format!("rank {rank} exceeds {MAX_RANK}")));
    }
    let mut out = Vec::with_capacity(9 + 4 * rank as usize + t.data().len() * t.dtype().width());
    out.extend_from_slice(MAGIC);
    out.push(t.dtype().code());
    out.extend_from_slice(&rank.to_le_bytes());
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("extent {d} overflows u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    match t.data() {
        TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        TensorData::U8(v) => out.extend_from_slice(v),
    }
    Ok(out)
}

pub fn decode_tensor(bytes: &[u8]) -> Result<TensorValue> {
    let fail = |m: &str| Error::Format(m.to_string());
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(fail("bad magic"));
    }
    let header = bytes.get(4..9).ok_or_else(|| fail("truncated header"))?;
    let dtype =
        DType::from_code(header[0]).ok_or_else(|| Error::Format(format!("unknown dtype code {}", header[0])))?;
    let rank = u32::from_le_bytes(header[1..5].try_into().unwrap());
    if rank > MAX_RANK {
        return Err(Error::Format(format!("rank {rank} exceeds {MAX_RANK}")));
    }
    let dims_end = 9 + 4 * rank as usize;
    let dims = bytes.get(9..dims_end).ok_or_else(|| fail("truncated extents"))?;
    let shape: Vec<usize> = dims.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize).collect();
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| fail("dimension product overflows"))?;
    let payload_len = count.checked_mul(dtype.width()).ok_or_else(|| fail("payload size overflows"))?;
    let payload = &bytes[dims_end..];
    if payload.len() < payload_len {
        return Err(Error::Format(format!("truncated payload: need {payload_len} bytes, have {}", payload.len())));
    }
    if payload.len() > payload_len {
        return Err(fail("trailing bytes after payload"));
    }
    let data = match dtype {
        DType::F32 => {
            TensorData::F32(payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
        }
        DType::F64 => {
            TensorData::F64(payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
        }
        DType::U8 => TensorData::U8(payload.to_vec()),
    };
    TensorValue::new(shape, data)
}

pub fn write_tensor_file(path: impl AsRef<Path>, t: &TensorValue) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_tensor(t)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_tensor_file(path: impl AsRef<Path>) -> Result<TensorValue> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes)
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub file: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CheckpointManifest {
    pub tensors: BTreeMap<String, ManifestEntry>,
    #[serde(default)]
    pub config: serde_json::Value,
}

pub const MANIFEST_FILE: &str = "manifest.json";

fn file_name_for(name: &str) -> String {
    let safe: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '_' || c == '-' { c } else { '_' })
        .collect();
    format!("{safe}.fmt")
}

/// Writes every tensor plus the manifest into `dir` (created if missing).
pub fn save_checkpoint(
    dir: impl AsRef<Path>,
    tensors: &BTreeMap<String, Tensor>,
    config: serde_json::Value,
) -> Result<CheckpointManifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = BTreeMap::new();
    for (name, t) in tensors {
        let file = file_name_for(name);
        let value = TensorValue::from_tensor(t);
        write_tensor_file(dir.join(&file), &value)?;
        entries.insert(name.clone(), ManifestEntry { file, shape: t.shape().to_vec(), dtype: value.dtype() });
    }
    let manifest = CheckpointManifest { tensors: entries, config };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<CheckpointManifest> {
    let path = dir.as_ref().join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(BTreeMap<String, Tensor>, CheckpointManifest)> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    let mut out = BTreeMap::new();
    for (name, entry) in &manifest.tensors {
        let value = read_tensor_file(dir.join(&entry.file))?;
        if value.shape() != entry.shape.as_slice() || value.dtype() != entry.dtype {
            return Err(Error::Format(format!("`{name}` does not match its manifest entry")));
        }
        out.insert(name.clone(), value.to_tensor());
    }
    Ok((out, manifest))
}
