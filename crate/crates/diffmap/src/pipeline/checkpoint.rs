//! Single-file checkpoint container.
//!
//! Layout: magic `DMCK`, format version (u32 LE), header length (u64 LE), a
//! JSON header carrying the kind, all configuration, and a tensor index, then
//! the concatenated raw `f32` little-endian tensor payloads. Writing the same
//! state twice produces identical bytes.

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"DMCK";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    kind: String,
    configs: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

/// In-memory checkpoint: a kind tag, arbitrary JSON configuration, and named
/// tensors.
#[derive(Debug)]
pub struct Checkpoint {
    pub kind: String,
    pub configs: serde_json::Value,
    pub tensors: Vec<(String, ArrayD<f32>)>,
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut payload: Vec<u8> = Vec::new();
    let mut entries = Vec::with_capacity(ckpt.tensors.len());
    for (name, tensor) in &ckpt.tensors {
        let offset = payload.len();
        let std_layout = tensor.as_standard_layout();
        for v in std_layout.iter() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(TensorEntry {
            name: name.clone(),
            shape: tensor.shape().to_vec(),
            offset,
            len: tensor.len(),
        });
    }
    let header = Header {
        kind: ckpt.kind.clone(),
        configs: ckpt.configs.clone(),
        tensors: entries,
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + header_json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&payload);
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)
        .map_err(|e| Error::config(format!("cannot read checkpoint {}: {e}", path.display())))?;
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(Error::config(format!("{} is not a checkpoint file", path.display())));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::config(format!("unsupported checkpoint version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    if bytes.len() < 16 + header_len {
        return Err(Error::config("truncated checkpoint header".to_string()));
    }
    let header: Header = serde_json::from_slice(&bytes[16..16 + header_len])
        .map_err(|e| Error::config(format!("malformed checkpoint header: {e}")))?;
    let payload = &bytes[16 + header_len..];
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        let start = entry.offset;
        let end = start + entry.len * 4;
        if end > payload.len() {
            return Err(Error::config(format!(
                "checkpoint tensor '{}' extends past payload",
                entry.name
            )));
        }
        let data: Vec<f32> = payload[start..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let arr = ArrayD::from_shape_vec(IxDyn(&entry.shape), data)
            .map_err(|e| Error::config(format!("checkpoint tensor '{}': {e}", entry.name)))?;
        tensors.push((entry.name.clone(), arr));
    }
    Ok(Checkpoint {
        kind: header.kind,
        configs: header.configs,
        tensors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("test.dmck");
        let ckpt = Checkpoint {
            kind: "vqvae".to_string(),
            configs: serde_json::json!({"factor": 8, "beta": 0.25}),
            tensors: vec![
                (
                    "a.w".to_string(),
                    ArrayD::from_shape_vec(IxDyn(&[2, 3]), vec![1.5, -0.25, 3.0, 0.1, 0.2, -9.75])
                        .unwrap(),
                ),
                ("b".to_string(), ArrayD::from_elem(IxDyn(&[4]), 0.125f32)),
            ],
        };
        save_checkpoint(&path, &ckpt).unwrap();
        let bytes1 = std::fs::read(&path).unwrap();
        save_checkpoint(&path, &ckpt).unwrap();
        let bytes2 = std::fs::read(&path).unwrap();
        assert_eq!(bytes1, bytes2, "writes must be deterministic");

        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.kind, "vqvae");
        assert_eq!(loaded.configs["factor"], 8);
        assert_eq!(loaded.tensors.len(), 2);
        assert_eq!(loaded.tensors[0].0, "a.w");
        assert_eq!(loaded.tensors[0].1, ckpt.tensors[0].1);
        assert_eq!(loaded.tensors[1].1, ckpt.tensors[1].1);
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.dmck");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
