//! Directory-level evaluation: pair prediction and ground-truth sample
//! directories by id, vectorize the ground truth, and aggregate the metrics
//! into a report.

use std::fs;
use std::path::Path;

use super::{sample::Prediction, vectorize_map};
use crate::error::{Error, Result};
use crate::mapgen::{load_sample, save_sample, Dataset, MapSample, PolylineSet};
use crate::metrics::{EvalAccumulator, EvalReport, SamplePrediction};

pub const POLYLINES_FILE: &str = "polylines.json";
pub const BASELINE_FILE: &str = "baseline.u8.bin";

/// Files written per predicted sample (in addition to the sample format):
/// vectorized instances as JSON and the baseline's own semantic masks.
pub struct PredictionArtifacts;

/// Write one prediction as a sample directory with sidecar artifacts.
pub fn write_prediction(dir: &Path, source: &MapSample, pred: &Prediction) -> Result<()> {
    let sample = MapSample {
        gt: pred.map.clone(),
        observation: pred.probs.clone(),
        scene_seed: source.scene_seed,
        meta: [("kind".to_string(), "prediction".to_string())].into(),
    };
    save_sample(&sample, dir)?;
    fs::write(dir.join(POLYLINES_FILE), serde_json::to_vec_pretty(&pred.polylines)?)?;
    fs::write(
        dir.join(BASELINE_FILE),
        pred.baseline_semantic
            .as_standard_layout()
            .as_slice()
            .expect("contiguous"),
    )?;
    Ok(())
}

pub fn load_prediction_polylines(dir: &Path) -> Result<PolylineSet> {
    let raw = fs::read(dir.join(POLYLINES_FILE))
        .map_err(|e| Error::data(format!("cannot read {}: {e}", dir.join(POLYLINES_FILE).display())))?;
    let set: PolylineSet = serde_json::from_slice(&raw)
        .map_err(|e| Error::data(format!("malformed polylines.json: {e}")))?;
    set.validate()?;
    Ok(set)
}

/// Evaluate a prediction directory against a ground-truth dataset directory.
/// Sample ids must match; missing ids are listed in the error.
pub fn evaluate_dirs(pred_root: &Path, gt_root: &Path, cuts: &[f64]) -> Result<EvalReport> {
    let gt_ds = Dataset::open(gt_root)?;
    let mut missing = Vec::new();
    for id in &gt_ds.index.ids {
        if !pred_root.join(id).join(crate::mapgen::SAMPLE_MANIFEST).exists() {
            missing.push(id.clone());
        }
    }
    if !missing.is_empty() {
        return Err(Error::data(format!(
            "prediction directory is missing {} sample(s): {}",
            missing.len(),
            missing.join(", ")
        )));
    }

    let intervals = EvalAccumulator::intervals_from_cuts(cuts)?;
    let mut acc = EvalAccumulator::new(intervals, gt_ds.index.scene.strokes)?;
    for (i, id) in gt_ds.index.ids.iter().enumerate() {
        let gt = gt_ds.load(i)?;
        let pred = load_sample(&pred_root.join(id))?;
        let pred_polys = load_prediction_polylines(&pred_root.join(id))?;
        let gt_polys = vectorize_map(&gt.gt);
        acc.add_sample(
            &SamplePrediction {
                map: &pred.gt,
                polylines: &pred_polys,
            },
            &SamplePrediction {
                map: &gt.gt,
                polylines: &gt_polys,
            },
        )?;
    }
    Ok(acc.finish())
}
