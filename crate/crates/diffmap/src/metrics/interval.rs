//! Multi-interval evaluation along the driving axis and the aggregated
//! report. Masks are clipped by pixel-center membership, polylines are
//! clipped geometrically (segments split exactly at the cuts), and per-class
//! metrics that have no content in an interval are reported as undefined
//! rather than zero.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use super::{
    average_precision, chamfer, densify, match_instances, MatchCandidate, MatchEntry,
    MatchResult, CHAMFER_SPACING_M,
};
use crate::error::{Error, Result};
use crate::mapgen::{rasterize_polyline, PolylineSet, SemanticMap, StrokeWidths, CLASS_NAMES, NUM_CLASSES};

/// Dual-gate matching thresholds.
pub const IOU_THRESHOLD: f64 = 0.1;
pub const CD_THRESHOLD_M: f64 = 1.0;

/// One side of an evaluation: a labeled map plus its vectorized instances
/// (for ground truth the polylines are traced from the map with
/// confidence 1).
pub struct SamplePrediction<'a> {
    pub map: &'a SemanticMap,
    pub polylines: &'a PolylineSet,
}

/// Clip a polyline to the slab `a <= x < b`, splitting segments exactly at
/// the cuts. Returns the surviving pieces (each with at least one point).
pub fn clip_polyline(points: &[[f64; 2]], a: f64, b: f64) -> Vec<Vec<[f64; 2]>> {
    let inside = |p: &[f64; 2]| p[0] >= a && p[0] < b;
    match points.len() {
        0 => return Vec::new(),
        1 => {
            return if inside(&points[0]) {
                vec![vec![points[0]]]
            } else {
                Vec::new()
            }
        }
        _ => {}
    }
    let mut pieces: Vec<Vec<[f64; 2]>> = Vec::new();
    let mut cur: Vec<[f64; 2]> = Vec::new();
    let mut flush = |cur: &mut Vec<[f64; 2]>| {
        if cur.len() >= 2 {
            pieces.push(std::mem::take(cur));
        } else {
            cur.clear();
        }
    };
    for w in points.windows(2) {
        let (p, q) = (w[0], w[1]);
        let dx = q[0] - p[0];
        // parameter range of the segment inside [a, b]
        let (t0, t1) = if dx.abs() == 0.0 {
            if p[0] >= a && p[0] <= b {
                (0.0, 1.0)
            } else {
                (1.0, 0.0)
            }
        } else {
            let ta = (a - p[0]) / dx;
            let tb = (b - p[0]) / dx;
            (ta.min(tb).max(0.0), ta.max(tb).min(1.0))
        };
        if t1 <= t0 {
            flush(&mut cur);
            continue;
        }
        let lerp = |t: f64| -> [f64; 2] {
            if t == 0.0 {
                p
            } else if t == 1.0 {
                q
            } else {
                [p[0] + t * dx, p[1] + t * (q[1] - p[1])]
            }
        };
        let s = lerp(t0);
        let e = lerp(t1);
        match cur.last() {
            Some(last) if *last == s => {}
            Some(_) => {
                flush(&mut cur);
                cur.push(s);
            }
            None => cur.push(s),
        }
        if e != s {
            cur.push(e);
        }
        if t1 < 1.0 {
            flush(&mut cur);
        }
    }
    flush(&mut cur);
    pieces
}

/// Metrics of one class in one interval; `None` marks an undefined entry
/// (no content on either side for IoU/AP, an empty side for CD).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntervalMetrics {
    pub iou: Option<f64>,
    pub cd: Option<f64>,
    pub ap: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub intervals: Vec<[f64; 2]>,
    pub classes: Vec<String>,
    pub per_class: BTreeMap<String, BTreeMap<String, IntervalMetrics>>,
    pub means: BTreeMap<String, IntervalMetrics>,
}

pub fn format_interval(iv: [f64; 2]) -> String {
    let fmt = |v: f64| {
        if (v - v.round()).abs() < 1e-9 {
            format!("{}", v.round() as i64)
        } else {
            format!("{v}")
        }
    };
    format!("{}-{}", fmt(iv[0]), fmt(iv[1]))
}

impl EvalReport {
    /// Plain-text table: rows per class, interval blocks of IoU / CD / AP.
    pub fn to_table_string(&self) -> String {
        let mut out = String::new();
        let dash = "-".repeat(12 + 30 * self.intervals.len());
        out.push_str(&format!("{:<12}", "class"));
        for iv in &self.intervals {
            out.push_str(&format!("{:^30}", format_interval(*iv)));
        }
        out.push('\n');
        out.push_str(&format!("{:<12}", ""));
        for _ in &self.intervals {
            out.push_str(&format!("{:>9} {:>9} {:>9} ", "IoU", "CD", "AP"));
        }
        out.push('\n');
        out.push_str(&dash);
        out.push('\n');
        let cell = |v: Option<f64>| match v {
            Some(x) => format!("{x:>9.3}"),
            None => format!("{:>9}", "-"),
        };
        for class in &self.classes {
            out.push_str(&format!("{class:<12}"));
            for iv in &self.intervals {
                let m = &self.per_class[class][&format_interval(*iv)];
                out.push_str(&format!("{} {} {} ", cell(m.iou), cell(m.cd), cell(m.ap)));
            }
            out.push('\n');
        }
        out.push_str(&dash);
        out.push('\n');
        out.push_str(&format!("{:<12}", "mean"));
        for iv in &self.intervals {
            let m = &self.means[&format_interval(*iv)];
            out.push_str(&format!("{} {} {} ", cell(m.iou), cell(m.cd), cell(m.ap)));
        }
        out.push('\n');
        out
    }

    /// CSV export: class,interval,iou,cd,ap (empty cells for undefined).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,interval,iou,cd,ap\n");
        let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for class in &self.classes {
            for iv in &self.intervals {
                let key = format_interval(*iv);
                let m = &self.per_class[class][&key];
                out.push_str(&format!(
                    "{class},{key},{},{},{}\n",
                    cell(m.iou),
                    cell(m.cd),
                    cell(m.ap)
                ));
            }
        }
        out
    }
}

#[derive(Default, Clone)]
struct Cell {
    inter: usize,
    union: usize,
    any_content: bool,
    cd_sum: f64,
    cd_n: usize,
    entries: Vec<MatchEntry>,
    n_gt: usize,
}

/// Streaming evaluator: feed sample pairs, then [`EvalAccumulator::finish`].
pub struct EvalAccumulator {
    intervals: Vec<[f64; 2]>,
    strokes: StrokeWidths,
    cells: Vec<Vec<Cell>>,
}

impl EvalAccumulator {
    pub fn new(intervals: Vec<[f64; 2]>, strokes: StrokeWidths) -> Result<Self> {
        if intervals.is_empty() {
            return Err(Error::config("need at least one interval"));
        }
        for iv in &intervals {
            if iv[1] <= iv[0] {
                return Err(Error::config(format!("interval {iv:?} is empty")));
            }
        }
        Ok(EvalAccumulator {
            cells: vec![vec![Cell::default(); intervals.len()]; NUM_CLASSES],
            intervals,
            strokes,
        })
    }

    /// Cut points `c0,c1,...,cn` become intervals `[c0,c1), [c1,c2), ...`.
    pub fn intervals_from_cuts(cuts: &[f64]) -> Result<Vec<[f64; 2]>> {
        if cuts.len() < 2 {
            return Err(Error::config("need at least two cut points"));
        }
        if cuts.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::config("cut points must be strictly increasing"));
        }
        Ok(cuts.windows(2).map(|w| [w[0], w[1]]).collect())
    }

    pub fn add_sample(&mut self, pred: &SamplePrediction, gt: &SamplePrediction) -> Result<()> {
        if pred.map.semantic.dim() != gt.map.semantic.dim() {
            return Err(Error::contract("pred/gt raster shapes differ".to_string()));
        }
        let grid = gt.map.grid;
        let (h, _w) = gt.map.instance.dim();
        let row_x: Vec<f64> = (0..h).map(|i| grid.pixel_center(i, 0)[0]).collect();

        for (ii, iv) in self.intervals.clone().iter().enumerate() {
            let in_rows: Vec<bool> = row_x.iter().map(|&x| x >= iv[0] && x < iv[1]).collect();
            for class_id in 0..NUM_CLASSES {
                let cell = &mut self.cells[class_id][ii];

                // mask IoU on the clipped class channels
                let mut inter = 0usize;
                let mut union = 0usize;
                let mut any = false;
                for i in 0..h {
                    if !in_rows[i] {
                        continue;
                    }
                    for j in 0..gt.map.width() {
                        let a = pred.map.semantic[(class_id, i, j)] > 0;
                        let b = gt.map.semantic[(class_id, i, j)] > 0;
                        inter += (a && b) as usize;
                        union += (a || b) as usize;
                        any |= a || b;
                    }
                }
                cell.inter += inter;
                cell.union += union;
                cell.any_content |= any;

                // pooled chamfer between clipped curve point sets
                let pool = |set: &PolylineSet| -> Vec<[f64; 2]> {
                    let mut pts = Vec::new();
                    for p in set.of_class(class_id) {
                        for piece in clip_polyline(&p.points, iv[0], iv[1]) {
                            pts.extend(densify(&piece, CHAMFER_SPACING_M));
                        }
                    }
                    pts
                };
                let pred_pts = pool(pred.polylines);
                let gt_pts = pool(gt.polylines);
                if !pred_pts.is_empty() && !gt_pts.is_empty() {
                    cell.cd_sum += chamfer(&pred_pts, &gt_pts)?;
                    cell.cd_n += 1;
                }

                // instance matching within the interval
                let gt_cands = gt_candidates(gt, class_id, iv, &in_rows);
                let pred_cands =
                    pred_candidates(pred, class_id, iv, &in_rows, &self.strokes, &grid);
                let m = match_instances(&pred_cands, &gt_cands, IOU_THRESHOLD, CD_THRESHOLD_M)?;
                cell.entries.extend(m.entries);
                cell.n_gt += m.n_gt;
            }
        }
        Ok(())
    }

    pub fn finish(self) -> EvalReport {
        let mut per_class = BTreeMap::new();
        for (class_id, name) in CLASS_NAMES.iter().enumerate() {
            let mut row = BTreeMap::new();
            for (ii, iv) in self.intervals.iter().enumerate() {
                let cell = &self.cells[class_id][ii];
                let iou = if cell.any_content {
                    Some(if cell.union == 0 {
                        1.0
                    } else {
                        cell.inter as f64 / cell.union as f64
                    })
                } else {
                    None
                };
                let cd = (cell.cd_n > 0).then(|| cell.cd_sum / cell.cd_n as f64);
                let ap = if cell.n_gt == 0 && cell.entries.is_empty() {
                    None
                } else {
                    Some(average_precision(&MatchResult {
                        entries: cell.entries.clone(),
                        n_gt: cell.n_gt,
                    }))
                };
                row.insert(format_interval(*iv), IntervalMetrics { iou, cd, ap });
            }
            per_class.insert(name.to_string(), row);
        }

        let mut means = BTreeMap::new();
        for iv in &self.intervals {
            let key = format_interval(*iv);
            let collect = |f: &dyn Fn(&IntervalMetrics) -> Option<f64>| -> Option<f64> {
                let vals: Vec<f64> = per_class.values().filter_map(|row| f(&row[&key])).collect();
                if vals.is_empty() {
                    None
                } else {
                    Some(vals.iter().sum::<f64>() / vals.len() as f64)
                }
            };
            means.insert(
                key.clone(),
                IntervalMetrics {
                    iou: collect(&|m| m.iou),
                    cd: collect(&|m| m.cd),
                    ap: collect(&|m| m.ap),
                },
            );
        }

        EvalReport {
            intervals: self.intervals,
            classes: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
            per_class,
            means,
        }
    }
}

fn gt_candidates(
    gt: &SamplePrediction,
    class_id: usize,
    iv: &[f64; 2],
    in_rows: &[bool],
) -> Vec<MatchCandidate> {
    let (h, w) = gt.map.instance.dim();
    let mut out = Vec::new();
    for (idx, poly) in gt.polylines.items.iter().enumerate() {
        if poly.class_id != class_id {
            continue;
        }
        let inst_id = (idx + 1) as u16;
        let mask = Array2::from_shape_fn((h, w), |(i, j)| {
            in_rows[i] && gt.map.instance[(i, j)] == inst_id
        });
        let mut points = Vec::new();
        for piece in clip_polyline(&poly.points, iv[0], iv[1]) {
            points.extend(densify(&piece, CHAMFER_SPACING_M));
        }
        if points.is_empty() && !mask.iter().any(|&m| m) {
            continue;
        }
        out.push(MatchCandidate {
            confidence: 1.0,
            mask,
            points,
        });
    }
    out
}

fn pred_candidates(
    pred: &SamplePrediction,
    class_id: usize,
    iv: &[f64; 2],
    in_rows: &[bool],
    strokes: &StrokeWidths,
    grid: &crate::grid::GridSpec,
) -> Vec<MatchCandidate> {
    let mut out = Vec::new();
    for poly in pred.polylines.of_class(class_id) {
        let raster = rasterize_polyline(&poly.points, strokes.for_class(class_id), grid);
        let mask = Array2::from_shape_fn(raster.dim(), |(i, j)| in_rows[i] && raster[(i, j)] > 0);
        let mut points = Vec::new();
        for piece in clip_polyline(&poly.points, iv[0], iv[1]) {
            points.extend(densify(&piece, CHAMFER_SPACING_M));
        }
        if points.is_empty() && !mask.iter().any(|&m| m) {
            continue;
        }
        out.push(MatchCandidate {
            confidence: poly.confidence,
            mask,
            points,
        });
    }
    out
}

/// Evaluate matched prediction/ground-truth pairs into a report.
pub fn evaluate_dataset(
    pairs: &[(SamplePrediction, SamplePrediction)],
    intervals: Vec<[f64; 2]>,
    strokes: StrokeWidths,
) -> Result<EvalReport> {
    let mut acc = EvalAccumulator::new(intervals, strokes)?;
    for (pred, gt) in pairs {
        acc.add_sample(pred, gt)?;
    }
    Ok(acc.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instancing::{trace_polylines, TraceConfig, TraceInputs};
    use crate::mapgen::{generate_scene, SceneConfig, NUM_CLASSES};
    use crate::metrics::iou;

    fn polyline_len(points: &[[f64; 2]]) -> f64 {
        points
            .windows(2)
            .map(|w| ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt())
            .sum()
    }

    #[test]
    fn clip_preserves_length_across_cuts() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let n = rng.gen_range(2..12);
            let pts: Vec<[f64; 2]> = (0..n)
                .map(|_| [rng.gen_range(0.0..90.0), rng.gen_range(-15.0..15.0)])
                .collect();
            let total = polyline_len(&pts);
            let mut clipped = 0.0;
            for iv in [[0.0, 30.0], [30.0, 60.0], [60.0, 90.0]] {
                for piece in clip_polyline(&pts, iv[0], iv[1]) {
                    clipped += polyline_len(&piece);
                }
            }
            assert!(
                (clipped - total).abs() < 1e-6,
                "length not conserved: {clipped} vs {total}"
            );
        }
    }

    #[test]
    fn clip_splits_at_exact_cut() {
        let pts = vec![[25.0, 0.0], [35.0, 1.0]];
        let first = clip_polyline(&pts, 0.0, 30.0);
        let second = clip_polyline(&pts, 30.0, 60.0);
        assert_eq!(first.len(), 1);
        assert_eq!(second.len(), 1);
        let end = *first[0].last().unwrap();
        let start = second[0][0];
        assert_eq!(end, start);
        assert!((end[0] - 30.0).abs() < 1e-12);
    }

    #[test]
    fn clip_single_point_and_outside() {
        assert_eq!(clip_polyline(&[[5.0, 0.0]], 0.0, 30.0).len(), 1);
        assert_eq!(clip_polyline(&[[45.0, 0.0]], 0.0, 30.0).len(), 0);
        let seg = vec![[40.0, 0.0], [50.0, 0.0]];
        assert!(clip_polyline(&seg, 0.0, 30.0).is_empty());
    }

    fn traced(map: &SemanticMap) -> PolylineSet {
        let classes: Vec<usize> = (1..=map.num_instances())
            .map(|id| {
                let mut cls = 0;
                'outer: for i in 0..map.height() {
                    for j in 0..map.width() {
                        if map.instance[(i, j)] as usize == id {
                            for c in 0..NUM_CLASSES {
                                if map.semantic[(c, i, j)] > 0 {
                                    cls = c;
                                    break 'outer;
                                }
                            }
                        }
                    }
                }
                cls
            })
            .collect();
        trace_polylines(
            &TraceInputs {
                instance_map: &map.instance,
                classes: &classes,
                direction: &map.direction,
                class_probs: None,
            },
            &map.grid,
            &TraceConfig::default(),
        )
    }

    #[test]
    fn perfect_prediction_scores_perfectly() {
        let cfg = SceneConfig::short_range();
        let sample = generate_scene(40, &cfg).unwrap();
        let polys = traced(&sample.gt);
        let pred = SamplePrediction {
            map: &sample.gt,
            polylines: &polys,
        };
        let gt = SamplePrediction {
            map: &sample.gt,
            polylines: &polys,
        };
        let x1 = sample.gt.grid.x_range[1];
        let report = evaluate_dataset(
            &[(pred, gt)],
            vec![[0.0, x1]],
            cfg.strokes,
        )
        .unwrap();
        let key = format_interval([0.0, x1]);
        for class in &report.classes {
            let m = &report.per_class[class][&key];
            if let Some(iou) = m.iou {
                assert_eq!(iou, 1.0, "class {class}");
            }
            if let Some(cd) = m.cd {
                assert_eq!(cd, 0.0, "class {class}");
            }
            if let Some(ap) = m.ap {
                assert_eq!(ap, 1.0, "class {class}");
            }
        }
    }

    #[test]
    fn identity_partition_equals_global() {
        let cfg = SceneConfig::short_range();
        let a = generate_scene(41, &cfg).unwrap();
        let b = generate_scene(42, &cfg).unwrap(); // imperfect "prediction"
        let pa = traced(&a.gt);
        let pb = traced(&b.gt);
        let x1 = a.gt.grid.x_range[1];

        let single = evaluate_dataset(
            &[(
                SamplePrediction { map: &b.gt, polylines: &pb },
                SamplePrediction { map: &a.gt, polylines: &pa },
            )],
            vec![[0.0, x1]],
            cfg.strokes,
        )
        .unwrap();

        // global numbers computed directly from the full-extent definitions
        let key = format_interval([0.0, x1]);
        for (cid, class) in CLASS_NAMES.iter().enumerate() {
            let m = &single.per_class[*class][&key];
            let gm = Array2::from_shape_fn(a.gt.instance.dim(), |(i, j)| {
                a.gt.semantic[(cid, i, j)] > 0
            });
            let pm = Array2::from_shape_fn(b.gt.instance.dim(), |(i, j)| {
                b.gt.semantic[(cid, i, j)] > 0
            });
            let direct = iou(&pm, &gm).unwrap();
            assert_eq!(m.iou, Some(direct), "class {class} iou");

            let pool = |set: &PolylineSet| -> Vec<[f64; 2]> {
                set.of_class(cid)
                    .flat_map(|p| densify(&p.points, CHAMFER_SPACING_M))
                    .collect()
            };
            let (pp, gp) = (pool(&pb), pool(&pa));
            if !pp.is_empty() && !gp.is_empty() {
                let direct_cd = chamfer(&pp, &gp).unwrap();
                assert!((m.cd.unwrap() - direct_cd).abs() < 1e-12, "class {class} cd");
            }
        }
    }

    #[test]
    fn empty_intervals_are_undefined() {
        let cfg = SceneConfig::short_range();
        let sample = generate_scene(43, &cfg).unwrap();
        let polys = traced(&sample.gt);
        let pred = SamplePrediction {
            map: &sample.gt,
            polylines: &polys,
        };
        let gt = SamplePrediction {
            map: &sample.gt,
            polylines: &polys,
        };
        // the toy grid spans 19.2 m; [100, 130) has no content at all
        let report = evaluate_dataset(
            &[(pred, gt)],
            vec![[0.0, 19.2], [100.0, 130.0]],
            cfg.strokes,
        )
        .unwrap();
        let key = format_interval([100.0, 130.0]);
        for class in &report.classes {
            let m = &report.per_class[class][&key];
            assert_eq!(m.iou, None);
            assert_eq!(m.cd, None);
            assert_eq!(m.ap, None);
        }
    }

    #[test]
    fn cuts_to_intervals() {
        let ivs = EvalAccumulator::intervals_from_cuts(&[0.0, 30.0, 60.0, 90.0]).unwrap();
        assert_eq!(ivs, vec![[0.0, 30.0], [30.0, 60.0], [60.0, 90.0]]);
        assert!(EvalAccumulator::intervals_from_cuts(&[0.0]).is_err());
        assert!(EvalAccumulator::intervals_from_cuts(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn report_serializes_with_stable_keys() {
        let cfg = SceneConfig::short_range();
        let sample = generate_scene(44, &cfg).unwrap();
        let polys = traced(&sample.gt);
        let report = evaluate_dataset(
            &[(
                SamplePrediction { map: &sample.gt, polylines: &polys },
                SamplePrediction { map: &sample.gt, polylines: &polys },
            )],
            vec![[0.0, 9.6], [9.6, 19.2]],
            cfg.strokes,
        )
        .unwrap();
        let a = serde_json::to_string_pretty(&report).unwrap();
        let b = serde_json::to_string_pretty(&report).unwrap();
        assert_eq!(a, b);
        assert!(a.contains("per_class"));
        assert!(a.contains("divider"));
        let table = report.to_table_string();
        assert!(table.contains("divider"));
        let csv = report.to_csv();
        assert!(csv.starts_with("class,interval,iou,cd,ap"));
    }
}
