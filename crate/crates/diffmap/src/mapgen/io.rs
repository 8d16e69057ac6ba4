//! On-disk sample format.
//!
//! A sample is a directory holding `manifest.json` plus raw little-endian
//! payloads:
//!
//! ```text
//! sample/
//!   manifest.json        schema, grid, class names, dtypes, shapes, seed, meta
//!   semantic.u8.bin      C x H x W, one byte per pixel, values {0, 1}
//!   instance.u16.bin     H x W, little-endian u16 instance IDs
//!   direction.u8.bin     H x W, direction bins
//!   observation.f32.bin  C x H x W, little-endian f32 in [0, 1]
//! ```
//!
//! A dataset is a directory of sample subdirectories plus a `dataset.json`
//! index. Round-trips are bit-exact; loaders validate shapes against payload
//! sizes and name the offending field on mismatch.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::{MapSample, SemanticMap, CLASS_NAMES, N_DIR, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::grid::GridSpec;

pub const SAMPLE_MANIFEST: &str = "manifest.json";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct SampleManifest {
    schema_version: u32,
    grid: GridSpec,
    class_names: Vec<String>,
    n_dir: usize,
    scene_seed: u64,
    dtypes: BTreeMap<String, String>,
    shapes: BTreeMap<String, Vec<usize>>,
    meta: BTreeMap<String, String>,
}

fn expected_dtypes() -> BTreeMap<String, String> {
    [
        ("semantic", "u8"),
        ("instance", "u16le"),
        ("direction", "u8"),
        ("observation", "f32le"),
    ]
    .iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect()
}

/// Write a sample directory (creating it if needed).
pub fn save_sample(sample: &MapSample, dir: &Path) -> Result<()> {
    sample.validate()?;
    fs::create_dir_all(dir)?;
    let (c, h, w) = sample.gt.semantic.dim();

    let mut shapes = BTreeMap::new();
    shapes.insert("semantic".to_string(), vec![c, h, w]);
    shapes.insert("instance".to_string(), vec![h, w]);
    shapes.insert("direction".to_string(), vec![h, w]);
    shapes.insert("observation".to_string(), vec![c, h, w]);

    let manifest = SampleManifest {
        schema_version: SCHEMA_VERSION,
        grid: sample.gt.grid,
        class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        n_dir: N_DIR,
        scene_seed: sample.scene_seed,
        dtypes: expected_dtypes(),
        shapes,
        meta: sample.meta.clone(),
    };
    fs::write(dir.join(SAMPLE_MANIFEST), serde_json::to_vec_pretty(&manifest)?)?;

    fs::write(
        dir.join("semantic.u8.bin"),
        sample.gt.semantic.as_standard_layout().as_slice().expect("contiguous"),
    )?;
    let mut inst = Vec::with_capacity(h * w * 2);
    for &v in sample.gt.instance.as_standard_layout().iter() {
        inst.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(dir.join("instance.u16.bin"), inst)?;
    fs::write(
        dir.join("direction.u8.bin"),
        sample.gt.direction.as_standard_layout().as_slice().expect("contiguous"),
    )?;
    let mut obs = Vec::with_capacity(c * h * w * 4);
    for &v in sample.observation.as_standard_layout().iter() {
        obs.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(dir.join("observation.f32.bin"), obs)?;
    Ok(())
}

fn read_payload(dir: &Path, name: &str, expect_bytes: usize) -> Result<Vec<u8>> {
    let path = dir.join(name);
    let bytes = fs::read(&path)
        .map_err(|e| Error::data(format!("cannot read payload '{name}': {e}")))?;
    if bytes.len() != expect_bytes {
        return Err(Error::data(format!(
            "payload size mismatch for '{name}': manifest implies {expect_bytes} bytes, file has {}",
            bytes.len()
        )));
    }
    Ok(bytes)
}

fn shape3(manifest: &SampleManifest, field: &str) -> Result<(usize, usize, usize)> {
    let s = manifest
        .shapes
        .get(field)
        .ok_or_else(|| Error::data(format!("manifest missing shape for '{field}'")))?;
    if s.len() != 3 {
        return Err(Error::data(format!("shape for '{field}' must have 3 dims")));
    }
    Ok((s[0], s[1], s[2]))
}

fn shape2(manifest: &SampleManifest, field: &str) -> Result<(usize, usize)> {
    let s = manifest
        .shapes
        .get(field)
        .ok_or_else(|| Error::data(format!("manifest missing shape for '{field}'")))?;
    if s.len() != 2 {
        return Err(Error::data(format!("shape for '{field}' must have 2 dims")));
    }
    Ok((s[0], s[1]))
}

/// Load a sample directory, validating the manifest against the payloads.
pub fn load_sample(dir: &Path) -> Result<MapSample> {
    let manifest_path = dir.join(SAMPLE_MANIFEST);
    let raw = fs::read(&manifest_path)
        .map_err(|e| Error::data(format!("cannot read manifest at {}: {e}", manifest_path.display())))?;
    let manifest: SampleManifest = serde_json::from_slice(&raw)
        .map_err(|e| Error::data(format!("malformed manifest: {e}")))?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(Error::data(format!(
            "unsupported schema_version {}",
            manifest.schema_version
        )));
    }
    if manifest.dtypes != expected_dtypes() {
        return Err(Error::data("unexpected dtype map in manifest".to_string()));
    }
    if manifest.class_names.len() != NUM_CLASSES {
        return Err(Error::data(format!(
            "manifest declares {} classes, expected {NUM_CLASSES}",
            manifest.class_names.len()
        )));
    }

    let (c, h, w) = shape3(&manifest, "semantic")?;
    if c != NUM_CLASSES {
        return Err(Error::data(format!("semantic channel count {c} != {NUM_CLASSES}")));
    }
    if shape2(&manifest, "instance")? != (h, w) {
        return Err(Error::data("instance shape differs from semantic".to_string()));
    }
    if shape2(&manifest, "direction")? != (h, w) {
        return Err(Error::data("direction shape differs from semantic".to_string()));
    }
    if shape3(&manifest, "observation")? != (c, h, w) {
        return Err(Error::data("observation shape differs from semantic".to_string()));
    }

    let sem_bytes = read_payload(dir, "semantic.u8.bin", c * h * w)?;
    let semantic = Array3::from_shape_vec((c, h, w), sem_bytes)
        .map_err(|e| Error::data(format!("semantic payload: {e}")))?;

    let inst_bytes = read_payload(dir, "instance.u16.bin", h * w * 2)?;
    let inst: Vec<u16> = inst_bytes
        .chunks_exact(2)
        .map(|b| u16::from_le_bytes([b[0], b[1]]))
        .collect();
    let instance = Array2::from_shape_vec((h, w), inst)
        .map_err(|e| Error::data(format!("instance payload: {e}")))?;

    let dir_bytes = read_payload(dir, "direction.u8.bin", h * w)?;
    let direction = Array2::from_shape_vec((h, w), dir_bytes)
        .map_err(|e| Error::data(format!("direction payload: {e}")))?;

    let obs_bytes = read_payload(dir, "observation.f32.bin", c * h * w * 4)?;
    let obs: Vec<f32> = obs_bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let observation = Array3::from_shape_vec((c, h, w), obs)
        .map_err(|e| Error::data(format!("observation payload: {e}")))?;

    let sample = MapSample {
        gt: SemanticMap {
            semantic,
            instance,
            direction,
            grid: manifest.grid,
        },
        observation,
        scene_seed: manifest.scene_seed,
        meta: manifest.meta,
    };
    sample.validate()?;
    Ok(sample)
}

/// Index written at the root of a dataset directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub schema_version: u32,
    pub n: usize,
    pub ids: Vec<String>,
    pub seed: u64,
    pub preset: String,
    pub scene: super::SceneConfig,
    pub grid: GridSpec,
    pub class_names: Vec<String>,
    pub n_dir: usize,
}

/// A dataset directory: index plus lazily loaded samples.
pub struct Dataset {
    pub root: PathBuf,
    pub index: DatasetIndex,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let raw = fs::read(root.join("dataset.json"))
            .map_err(|e| Error::data(format!("cannot read dataset index: {e}")))?;
        let index: DatasetIndex = serde_json::from_slice(&raw)
            .map_err(|e| Error::data(format!("malformed dataset index: {e}")))?;
        Ok(Dataset {
            root: root.to_path_buf(),
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.index.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.ids.is_empty()
    }

    pub fn sample_dir(&self, i: usize) -> PathBuf {
        self.root.join(&self.index.ids[i])
    }

    pub fn load(&self, i: usize) -> Result<MapSample> {
        load_sample(&self.sample_dir(i))
    }

    pub fn load_all(&self) -> Result<Vec<MapSample>> {
        (0..self.len()).map(|i| self.load(i)).collect()
    }
}

/// Generate and write a dataset of `n` scenes with per-sample seeds
/// `seed, seed + 1, ...`.
pub fn generate_dataset(
    root: &Path,
    cfg: &super::SceneConfig,
    n: usize,
    seed: u64,
    preset: &str,
) -> Result<Dataset> {
    fs::create_dir_all(root)?;
    let mut ids = Vec::with_capacity(n);
    for i in 0..n {
        let id = format!("{i:05}");
        let sample = super::generate_scene(seed + i as u64, cfg)?;
        save_sample(&sample, &root.join(&id))?;
        ids.push(id);
    }
    let index = DatasetIndex {
        schema_version: SCHEMA_VERSION,
        n,
        ids,
        seed,
        preset: preset.to_string(),
        scene: cfg.clone(),
        grid: cfg.grid,
        class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        n_dir: N_DIR,
    };
    fs::write(root.join("dataset.json"), serde_json::to_vec_pretty(&index)?)?;
    Ok(Dataset {
        root: root.to_path_buf(),
        index,
    })
}
