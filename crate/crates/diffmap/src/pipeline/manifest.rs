//! Run manifests: every training or evaluation run writes one next to its
//! outputs, recording the full configuration, a content hash of the input
//! data, and where the outputs went. Manifests contain nothing volatile, so
//! reruns with identical inputs produce identical manifests.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub code_version: String,
    pub config: serde_json::Value,
    pub data_hash: Option<String>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub metrics: Option<serde_json::Value>,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value) -> Self {
        RunManifest {
            command: command.to_string(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            config,
            data_hash: None,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            metrics: None,
        }
    }

    pub fn input(mut self, key: &str, path: &Path) -> Self {
        self.inputs.insert(key.to_string(), path.display().to_string());
        self
    }

    pub fn output(mut self, key: &str, path: &Path) -> Self {
        self.outputs.insert(key.to_string(), path.display().to_string());
        self
    }

    pub fn with_data_hash(mut self, hash: String) -> Self {
        self.data_hash = Some(hash);
        self
    }

    pub fn with_metrics(mut self, metrics: serde_json::Value) -> Self {
        self.metrics = Some(metrics);
        self
    }

    /// Write as `<stem>.manifest.json` next to the given output path.
    pub fn write_next_to(&self, output: &Path) -> Result<()> {
        let name = match output.file_name() {
            Some(n) => format!("{}.manifest.json", n.to_string_lossy()),
            None => "run.manifest.json".to_string(),
        };
        let path = output.with_file_name(name);
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

/// Content hash of a dataset directory: dataset.json plus every file of every
/// sample subdirectory, in sorted order.
pub fn hash_dataset_dir(root: &Path) -> Result<String> {
    let mut hasher = Sha256::new();
    let index_path = root.join("dataset.json");
    let index = fs::read(&index_path)
        .map_err(|e| Error::data(format!("cannot read {}: {e}", index_path.display())))?;
    hasher.update(&index);

    let mut subdirs: Vec<_> = fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.path())
        .collect();
    subdirs.sort();
    for dir in subdirs {
        let mut files: Vec<_> = fs::read_dir(&dir)?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_file())
            .map(|e| e.path())
            .collect();
        files.sort();
        for f in files {
            hasher.update(f.file_name().expect("file name").to_string_lossy().as_bytes());
            hasher.update(fs::read(&f)?);
        }
    }
    Ok(format!("{:x}", hasher.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mapgen::{generate_dataset, SceneConfig};

    #[test]
    fn dataset_hash_is_stable_and_content_sensitive() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("ds");
        let cfg = SceneConfig::short_range();
        generate_dataset(&root, &cfg, 2, 3, "short").unwrap();
        let a = hash_dataset_dir(&root).unwrap();
        let b = hash_dataset_dir(&root).unwrap();
        assert_eq!(a, b);
        // flip one payload byte
        let p = root.join("00000").join("semantic.u8.bin");
        let mut bytes = fs::read(&p).unwrap();
        bytes[0] ^= 1;
        fs::write(&p, bytes).unwrap();
        let c = hash_dataset_dir(&root).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn manifest_round_trips_and_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("model.dmck");
        fs::write(&out, b"x").unwrap();
        let m = RunManifest::new("train-vqvae", serde_json::json!({"steps": 10}))
            .input("data", Path::new("/data"))
            .output("checkpoint", &out)
            .with_data_hash("abc".to_string());
        m.write_next_to(&out).unwrap();
        let path = dir.path().join("model.dmck.manifest.json");
        let one = fs::read(&path).unwrap();
        m.write_next_to(&out).unwrap();
        let two = fs::read(&path).unwrap();
        assert_eq!(one, two);
        let parsed: RunManifest = serde_json::from_slice(&one).unwrap();
        assert_eq!(parsed.command, "train-vqvae");
    }
}
