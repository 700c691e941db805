//! Checkpoint directories: `manifest.json` plus `weights.bin`.
//!
//! `weights.bin` holds little-endian 32-bit floats, concatenated in manifest
//! order. The manifest records each array's name, shape, dtype and byte
//! offset, plus a free-form architecture/metadata section owned by the
//! checkpoint kind.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const FORMAT: &str = "diffprobe-checkpoint";
pub const VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub kind: String,
    pub endianness: String,
    pub arrays: Vec<ArrayEntry>,
    pub info: serde_json::Value,
}

pub fn write_checkpoint(dir: &Path, kind: &str, info: serde_json::Value, params: &ParamStore) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut arrays = Vec::with_capacity(params.len());
    let mut offset = 0u64;
    for (name, t) in params.iter() {
        let bytes = 4 * t.len() as u64;
        arrays.push(ArrayEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: "f32".into(),
            offset,
            bytes,
        });
        offset += bytes;
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        kind: kind.into(),
        endianness: "little".into(),
        arrays,
        info,
    };
    write_atomic(&dir.join(WEIGHTS_FILE), &params.to_le_bytes())?;
    write_atomic(&dir.join(MANIFEST_FILE), &serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

pub fn read_checkpoint(dir: &Path, expected_kind: &str) -> Result<(Manifest, ParamStore)> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format {} v{}",
            manifest.format, manifest.version
        )));
    }
    if manifest.kind != expected_kind {
        return Err(Error::Checkpoint(format!(
            "expected a {expected_kind} checkpoint, found {}",
            manifest.kind
        )));
    }
    if manifest.endianness != "little" {
        return Err(Error::Checkpoint(format!("unsupported endianness {}", manifest.endianness)));
    }
    let blob = fs::read(dir.join(WEIGHTS_FILE))?;
    let mut params = ParamStore::new();
    for a in &manifest.arrays {
        if a.dtype != "f32" {
            return Err(Error::Checkpoint(format!("array {} has unsupported dtype {}", a.name, a.dtype)));
        }
        let n: usize = a.shape.iter().product();
        let (start, end) = (a.offset as usize, (a.offset + a.bytes) as usize);
        if a.bytes as usize != 4 * n || end > blob.len() {
            return Err(Error::Checkpoint(format!("array {} does not fit the weight blob", a.name)));
        }
        let data = blob[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        params.insert(a.name.clone(), Tensor::new(&a.shape, data)?);
    }
    Ok((manifest, params))
}

/// Writes through a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_f32_values() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = ParamStore::new();
        p.insert("conv.weight", Tensor::new(&[2, 1, 1, 1], vec![0.25, -1.5]).unwrap());
        p.insert("conv.bias", Tensor::new(&[2], vec![1.0 / 3.0, 7.0]).unwrap());
        write_checkpoint(dir.path(), "test", serde_json::json!({"a": 1}), &p).unwrap();
        let (m, q) = read_checkpoint(dir.path(), "test").unwrap();
        assert_eq!(m.arrays[1].offset, 8);
        assert_eq!(q.get("conv.weight").unwrap().data(), &[0.25, -1.5]);
        assert_eq!(q.get("conv.bias").unwrap().data()[0], (1.0f64 / 3.0) as f32 as f64);
        assert!(read_checkpoint(dir.path(), "other").is_err());
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = ParamStore::new();
        p.insert("w", Tensor::zeros(&[8]));
        write_checkpoint(dir.path(), "test", serde_json::Value::Null, &p).unwrap();
        fs::write(dir.path().join(WEIGHTS_FILE), [0u8; 12]).unwrap();
        assert!(matches!(read_checkpoint(dir.path(), "test"), Err(Error::Checkpoint(_))));
    }
}
