//! Evaluation metrics: mask IoU, directional and bidirectional Chamfer
//! distance over densified curves, dual-threshold (IoU + CD) instance
//! matching, interpolated average precision, and multi-interval evaluation
//! along the driving axis.

mod interval;

pub use interval::{
    clip_polyline, evaluate_dataset, format_interval, EvalAccumulator, EvalReport,
    IntervalMetrics, SamplePrediction,
};

use ndarray::Array2;

use crate::error::{Error, Result};

/// Default densification spacing for curves entering Chamfer computations.
pub const CHAMFER_SPACING_M: f64 = 0.1;

/// Intersection-over-union of two binary masks. Two empty masks agree
/// vacuously and score 1.0.
pub fn iou(m1: &Array2<bool>, m2: &Array2<bool>) -> Result<f64> {
    if m1.dim() != m2.dim() {
        return Err(Error::contract(format!(
            "iou shape mismatch: {:?} vs {:?}",
            m1.dim(),
            m2.dim()
        )));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&a, &b) in m1.iter().zip(m2.iter()) {
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    if union == 0 {
        Ok(1.0)
    } else {
        Ok(inter as f64 / union as f64)
    }
}

/// Directional Chamfer distance: mean over points of `c1` of the distance to
/// the nearest point of `c2`. Empty sets are a contract error (callers filter
/// empties and flag the metric undefined instead).
pub fn chamfer_dir(c1: &[[f64; 2]], c2: &[[f64; 2]]) -> Result<f64> {
    if c1.is_empty() || c2.is_empty() {
        return Err(Error::contract("chamfer_dir on empty point set".to_string()));
    }
    let mut total = 0.0;
    for p in c1 {
        let mut best = f64::INFINITY;
        for q in c2 {
            let d = ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
            if d < best {
                best = d;
            }
        }
        total += best;
    }
    Ok(total / c1.len() as f64)
}

/// Bidirectional Chamfer distance: `chamfer_dir(c1, c2) + chamfer_dir(c2, c1)`.
pub fn chamfer(c1: &[[f64; 2]], c2: &[[f64; 2]]) -> Result<f64> {
    Ok(chamfer_dir(c1, c2)? + chamfer_dir(c2, c1)?)
}

/// Resample a polyline so consecutive points are at most `max_step` apart
/// (original vertices are kept).
pub fn densify(points: &[[f64; 2]], max_step: f64) -> Vec<[f64; 2]> {
    assert!(max_step > 0.0);
    if points.len() < 2 {
        return points.to_vec();
    }
    let mut out = Vec::with_capacity(points.len());
    out.push(points[0]);
    for w in points.windows(2) {
        let (a, b) = (w[0], w[1]);
        let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
        let n = (len / max_step).ceil().max(1.0) as usize;
        for k in 1..=n {
            let t = k as f64 / n as f64;
            out.push([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]);
        }
    }
    out
}

/// One instance entering the matcher: a rasterized mask, a densified point
/// set, and (for predictions) a confidence.
#[derive(Debug, Clone)]
pub struct MatchCandidate {
    pub confidence: f64,
    pub mask: Array2<bool>,
    pub points: Vec<[f64; 2]>,
}

/// Per-prediction match outcome.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchEntry {
    pub confidence: f64,
    pub is_tp: bool,
    pub matched_gt: Option<usize>,
}

/// Matching outcome for one class (one sample or pooled).
#[derive(Debug, Clone, Default)]
pub struct MatchResult {
    pub entries: Vec<MatchEntry>,
    pub n_gt: usize,
}

/// Greedy confidence-ordered matching under the dual gate: a prediction
/// matches the unmatched ground-truth instance maximizing IoU subject to
/// `IoU > iou_thr` and `CD < cd_thr`. Unmatched predictions are false
/// positives.
pub fn match_instances(
    preds: &[MatchCandidate],
    gts: &[MatchCandidate],
    iou_thr: f64,
    cd_thr: f64,
) -> Result<MatchResult> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        preds[b]
            .confidence
            .total_cmp(&preds[a].confidence)
            .then(a.cmp(&b))
    });
    let mut gt_taken = vec![false; gts.len()];
    let mut entries = vec![
        MatchEntry {
            confidence: 0.0,
            is_tp: false,
            matched_gt: None,
        };
        preds.len()
    ];
    for &pi in &order {
        let pred = &preds[pi];
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if gt_taken[gi] {
                continue;
            }
            let overlap = iou(&pred.mask, &gt.mask)?;
            if overlap <= iou_thr {
                continue;
            }
            if pred.points.is_empty() || gt.points.is_empty() {
                continue;
            }
            let cd = chamfer(&pred.points, &gt.points)?;
            if cd >= cd_thr {
                continue;
            }
            let better = match best {
                None => true,
                Some((_, best_iou)) => overlap > best_iou,
            };
            if better {
                best = Some((gi, overlap));
            }
        }
        entries[pi] = match best {
            Some((gi, _)) => {
                gt_taken[gi] = true;
                MatchEntry {
                    confidence: pred.confidence,
                    is_tp: true,
                    matched_gt: Some(gi),
                }
            }
            None => MatchEntry {
                confidence: pred.confidence,
                is_tp: false,
                matched_gt: None,
            },
        };
    }
    let result = MatchResult {
        entries,
        n_gt: gts.len(),
    };
    debug_assert!(result.entries.iter().filter(|e| e.is_tp).count() <= result.n_gt);
    Ok(result)
}

/// Interpolated average precision over recall thresholds 0.1..=1.0:
/// `AP_r` is the maximum precision among operating points with recall >= r,
/// 0 when that recall is never reached. With no ground truth, AP is 1.0 when
/// there are no predictions and 0.0 otherwise.
pub fn average_precision(m: &MatchResult) -> f64 {
    if m.n_gt == 0 {
        return if m.entries.is_empty() { 1.0 } else { 0.0 };
    }
    let mut order: Vec<usize> = (0..m.entries.len()).collect();
    order.sort_by(|&a, &b| {
        m.entries[b]
            .confidence
            .total_cmp(&m.entries[a].confidence)
            .then(a.cmp(&b))
    });
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(order.len());
    for (k, &i) in order.iter().enumerate() {
        if m.entries[i].is_tp {
            tp += 1;
        }
        let precision = tp as f64 / (k + 1) as f64;
        let recall = tp as f64 / m.n_gt as f64;
        points.push((recall, precision));
    }
    let mut ap = 0.0;
    for r10 in 1..=10 {
        let r = r10 as f64 / 10.0;
        let best = points
            .iter()
            .filter(|(rec, _)| *rec >= r - 1e-12)
            .map(|(_, p)| *p)
            .fold(0.0f64, f64::max);
        ap += best;
    }
    ap / 10.0
}
