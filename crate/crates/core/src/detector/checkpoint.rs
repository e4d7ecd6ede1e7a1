//! Single-file checkpoint archive.
//!
//! ```text
//! b"STARMTCK" | u64 LE manifest length | manifest JSON | tensor buffers
//! ```
//!
//! The manifest lists `{name, shape, scope, dtype, offset, bytes, sha256}` per
//! tensor, the architecture and its fingerprint, and free-form training
//! metadata. Buffers are little-endian `float32`, concatenated in manifest order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::params::{ArchConfig, ModelParams, ParamTensor, Scope};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"STARMTCK";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub scope: Scope,
    pub dtype: String,
    pub offset: usize,
    pub bytes: usize,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub fingerprint: String,
    pub arch: ArchConfig,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub metadata: BTreeMap<String, serde_json::Value>,
}

pub fn encode_checkpoint(
    params: &ModelParams,
    metadata: &BTreeMap<String, serde_json::Value>,
) -> Result<Vec<u8>> {
    params.check_layout()?;
    let mut buffers = Vec::new();
    let mut entries = Vec::new();
    for t in &params.tensors {
        let start = buffers.len();
        for v in t.value.data() {
            buffers.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        let bytes = &buffers[start..];
        entries.push(TensorEntry {
            name: t.name.clone(),
            shape: t.value.shape().to_vec(),
            scope: t.scope,
            dtype: "float32".into(),
            offset: start,
            bytes: bytes.len(),
            sha256: hex::encode(Sha256::digest(bytes)),
        });
    }
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        fingerprint: params.fingerprint(),
        arch: params.arch.clone(),
        tensors: entries,
        metadata: metadata.clone(),
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| Error::Corrupt(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + json.len() + buffers.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&buffers);
    Ok(out)
}

/// Decodes an archive. With `expected`, the stored fingerprint must match it.
pub fn decode_checkpoint(
    bytes: &[u8],
    expected: Option<&ArchConfig>,
) -> Result<(ModelParams, CheckpointManifest)> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Corrupt("not a checkpoint archive".into()));
    }
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let json = bytes
        .get(16..16 + mlen)
        .ok_or_else(|| Error::Corrupt("truncated manifest".into()))?;
    let manifest: CheckpointManifest =
        serde_json::from_slice(json).map_err(|e| Error::Corrupt(format!("manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Corrupt(format!(
            "unsupported format version {}",
            manifest.format_version
        )));
    }
    let own = manifest.arch.fingerprint();
    if own != manifest.fingerprint {
        return Err(Error::Fingerprint {
            expected: own,
            found: manifest.fingerprint.clone(),
        });
    }
    if let Some(arch) = expected {
        let want = arch.fingerprint();
        if want != manifest.fingerprint {
            return Err(Error::Fingerprint {
                expected: want,
                found: manifest.fingerprint.clone(),
            });
        }
    }
    let body = &bytes[16 + mlen..];
    let total: usize = manifest.tensors.iter().map(|t| t.bytes).sum();
    if body.len() != total {
        return Err(Error::Corrupt(format!(
            "buffer region has {} bytes, manifest declares {total}",
            body.len()
        )));
    }
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for e in &manifest.tensors {
        if e.dtype != "float32" {
            return Err(Error::Corrupt(format!("{}: dtype {}", e.name, e.dtype)));
        }
        let raw = body
            .get(e.offset..e.offset + e.bytes)
            .ok_or_else(|| Error::Corrupt(format!("{}: buffer out of range", e.name)))?;
        if hex::encode(Sha256::digest(raw)) != e.sha256 {
            return Err(Error::Corrupt(format!("{}: checksum mismatch", e.name)));
        }
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        tensors.push(ParamTensor {
            name: e.name.clone(),
            scope: e.scope,
            value: Tensor::from_vec(&e.shape, data)
                .map_err(|err| Error::Corrupt(format!("{}: {err}", e.name)))?,
        });
    }
    let params = ModelParams {
        arch: manifest.arch.clone(),
        tensors,
    };
    params
        .check_layout()
        .map_err(|e| Error::Corrupt(e.to_string()))?;
    if !params.is_finite() {
        return Err(Error::Corrupt("non-finite weights".into()));
    }
    Ok((params, manifest))
}

pub fn save_checkpoint(
    params: &ModelParams,
    path: &Path,
    metadata: &BTreeMap<String, serde_json::Value>,
) -> Result<()> {
    let bytes = encode_checkpoint(params, metadata)?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(
    path: &Path,
    expected: Option<&ArchConfig>,
) -> Result<(ModelParams, CheckpointManifest)> {
    if !path.exists() {
        return Err(Error::Missing {
            path: path.to_path_buf(),
        });
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, expected)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta() -> BTreeMap<String, serde_json::Value> {
        let mut m = BTreeMap::new();
        m.insert("iters".into(), serde_json::json!(12));
        m.insert("loss".into(), serde_json::json!(0.125));
        m
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let p = ModelParams::init(&ArchConfig::default(), 4).unwrap();
        let a = encode_checkpoint(&p, &meta()).unwrap();
        let (q, m) = decode_checkpoint(&a, Some(&ArchConfig::default())).unwrap();
        let b = encode_checkpoint(&q, &m.metadata).unwrap();
        assert_eq!(a, b);
        let mut pq = p.clone();
        pq.quantize_f32();
        assert_eq!(pq, q);
    }

    #[test]
    fn wrong_architecture_is_rejected() {
        let p = ModelParams::init(&ArchConfig::default(), 4).unwrap();
        let a = encode_checkpoint(&p, &meta()).unwrap();
        let other = ArchConfig {
            tam_hidden: 32,
            ..ArchConfig::default()
        };
        assert!(matches!(
            decode_checkpoint(&a, Some(&other)),
            Err(Error::Fingerprint { .. })
        ));
    }

    #[test]
    fn corrupted_buffer_fails_checksum() {
        let p = ModelParams::init(&ArchConfig::default(), 4).unwrap();
        let mut a = encode_checkpoint(&p, &meta()).unwrap();
        let n = a.len();
        a[n - 10] ^= 0x40;
        match decode_checkpoint(&a, None) {
            Err(Error::Corrupt(msg)) => assert!(msg.contains("checksum"), "{msg}"),
            other => panic!("expected checksum error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_file_is_rejected() {
        let p = ModelParams::init(&ArchConfig::default(), 4).unwrap();
        let a = encode_checkpoint(&p, &meta()).unwrap();
        assert!(decode_checkpoint(&a[..a.len() - 3], None).is_err());
        assert!(decode_checkpoint(&a[..20], None).is_err());
    }
}
