//! Vectorization: morphological skeletonization, ordered traversal seeded at
//! an endpoint with ties broken toward the local direction bin, and
//! Douglas-Peucker simplification in meters.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::grid::GridSpec;
use crate::mapgen::{bin_angle, Polyline, PolylineSet};

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct TraceConfig {
    /// Douglas-Peucker tolerance, meters.
    pub tolerance_m: f64,
}

impl Default for TraceConfig {
    fn default() -> Self {
        TraceConfig { tolerance_m: 0.12 }
    }
}

/// Everything tracing needs about a labeled map.
pub struct TraceInputs<'a> {
    /// Instance IDs, 0 = background.
    pub instance_map: &'a Array2<u16>,
    /// Class of each instance id (`classes[id - 1]`).
    pub classes: &'a [usize],
    /// Per-pixel direction bins (0 = none); used for traversal tie-breaking.
    pub direction: &'a Array2<u8>,
    /// Optional per-class foreground probabilities for confidences
    /// (`None` gives confidence 1.0, the ground-truth case).
    pub class_probs: Option<&'a Array3<f32>>,
}

/// Zhang-Suen thinning of a binary mask down to a 1-px-wide skeleton.
pub fn skeletonize(mask: &Array2<bool>) -> Array2<bool> {
    let (h, w) = mask.dim();
    let mut img = mask.clone();
    let idx = |i: isize, j: isize, img: &Array2<bool>| -> u8 {
        if i < 0 || j < 0 || i >= h as isize || j >= w as isize {
            0
        } else {
            img[(i as usize, j as usize)] as u8
        }
    };
    loop {
        let mut changed = false;
        for phase in 0..2 {
            let mut to_clear = Vec::new();
            for i in 0..h as isize {
                for j in 0..w as isize {
                    if idx(i, j, &img) == 0 {
                        continue;
                    }
                    // neighbors p2..p9 clockwise from north
                    let p = [
                        idx(i - 1, j, &img),
                        idx(i - 1, j + 1, &img),
                        idx(i, j + 1, &img),
                        idx(i + 1, j + 1, &img),
                        idx(i + 1, j, &img),
                        idx(i + 1, j - 1, &img),
                        idx(i, j - 1, &img),
                        idx(i - 1, j - 1, &img),
                    ];
                    let b: u8 = p.iter().sum();
                    if !(2..=6).contains(&b) {
                        continue;
                    }
                    let mut a = 0;
                    for k in 0..8 {
                        if p[k] == 0 && p[(k + 1) % 8] == 1 {
                            a += 1;
                        }
                    }
                    if a != 1 {
                        continue;
                    }
                    let (c1, c2) = if phase == 0 {
                        (p[0] * p[2] * p[4], p[2] * p[4] * p[6])
                    } else {
                        (p[0] * p[2] * p[6], p[0] * p[4] * p[6])
                    };
                    if c1 == 0 && c2 == 0 {
                        to_clear.push((i as usize, j as usize));
                    }
                }
            }
            if !to_clear.is_empty() {
                changed = true;
                for (i, j) in to_clear {
                    img[(i, j)] = false;
                }
            }
        }
        if !changed {
            break;
        }
    }
    img
}

/// Perpendicular distance of `p` to the line through `a` and `b`.
fn point_line_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let dx = b[0] - a[0];
    let dy = b[1] - a[1];
    let len = (dx * dx + dy * dy).sqrt();
    if len == 0.0 {
        return ((p[0] - a[0]).powi(2) + (p[1] - a[1]).powi(2)).sqrt();
    }
    ((dy * p[0] - dx * p[1] + b[0] * a[1] - b[1] * a[0]) / len).abs()
}

/// Douglas-Peucker simplification keeping both endpoints.
pub fn douglas_peucker(points: &[[f64; 2]], tolerance: f64) -> Vec<[f64; 2]> {
    if points.len() <= 2 {
        return points.to_vec();
    }
    let mut keep = vec![false; points.len()];
    keep[0] = true;
    keep[points.len() - 1] = true;
    let mut stack = vec![(0usize, points.len() - 1)];
    while let Some((lo, hi)) = stack.pop() {
        if hi <= lo + 1 {
            continue;
        }
        let mut max_d = 0.0;
        let mut max_i = lo;
        for i in lo + 1..hi {
            let d = point_line_distance(points[i], points[lo], points[hi]);
            if d > max_d {
                max_d = d;
                max_i = i;
            }
        }
        if max_d > tolerance {
            keep[max_i] = true;
            stack.push((lo, max_i));
            stack.push((max_i, hi));
        }
    }
    points
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(p, _)| *p)
        .collect()
}

fn neighbors8(i: usize, j: usize, h: usize, w: usize) -> impl Iterator<Item = (usize, usize)> {
    let (i, j) = (i as isize, j as isize);
    let (h, w) = (h as isize, w as isize);
    (-1isize..=1)
        .flat_map(move |di| (-1isize..=1).map(move |dj| (di, dj)))
        .filter(|&(di, dj)| di != 0 || dj != 0)
        .map(move |(di, dj)| (i + di, j + dj))
        .filter(move |&(ni, nj)| ni >= 0 && nj >= 0 && ni < h && nj < w)
        .map(|(ni, nj)| (ni as usize, nj as usize))
}

/// Ordered traversal of a skeleton.
///
/// The skeleton of a predicted (or overlap-split) instance can consist of
/// several fragments. Each fragment is walked from an endpoint (every
/// endpoint tried, longest walk wins, ties to scan order), then fragments are
/// chained end-to-end by nearest-endpoint greedy ordering, reversing
/// fragments as needed.
fn walk_skeleton(skel: &Array2<bool>, direction: &Array2<u8>) -> Vec<(usize, usize)> {
    let (labels, n_comp) = super::connected_components(skel);
    if n_comp == 0 {
        return Vec::new();
    }
    let (h, w) = skel.dim();
    let mut fragments: Vec<Vec<(usize, usize)>> = Vec::with_capacity(n_comp);
    for comp in 1..=n_comp {
        let comp_mask = Array2::from_shape_fn((h, w), |(i, j)| labels[(i, j)] as usize == comp);
        fragments.push(walk_component(&comp_mask, direction));
    }
    fragments.retain(|f| !f.is_empty());
    if fragments.len() == 1 {
        return fragments.pop().expect("non-empty");
    }

    // chain fragments: start from the one containing the smallest pixel,
    // then repeatedly append the fragment with the nearest endpoint
    let dist = |a: (usize, usize), b: (usize, usize)| -> f64 {
        let di = a.0 as f64 - b.0 as f64;
        let dj = a.1 as f64 - b.1 as f64;
        (di * di + dj * dj).sqrt()
    };
    let start_idx = fragments
        .iter()
        .enumerate()
        .min_by_key(|(_, f)| *f.iter().min().expect("non-empty"))
        .map(|(i, _)| i)
        .expect("non-empty set");
    let mut chain = fragments.swap_remove(start_idx);
    // orient the first fragment so its smaller end leads
    if chain.last() < chain.first() {
        chain.reverse();
    }
    while !fragments.is_empty() {
        let end = *chain.last().expect("non-empty");
        let mut best = (0usize, false, f64::INFINITY);
        for (i, f) in fragments.iter().enumerate() {
            let d_head = dist(end, f[0]);
            let d_tail = dist(end, *f.last().expect("non-empty"));
            if d_head < best.2 {
                best = (i, false, d_head);
            }
            if d_tail < best.2 {
                best = (i, true, d_tail);
            }
        }
        let mut next = fragments.swap_remove(best.0);
        if best.1 {
            next.reverse();
        }
        chain.extend(next);
    }
    chain
}

/// Longest endpoint-seeded walk over one connected skeleton fragment.
fn walk_component(skel: &Array2<bool>, direction: &Array2<u8>) -> Vec<(usize, usize)> {
    let (h, w) = skel.dim();
    let pixels: Vec<(usize, usize)> = (0..h)
        .flat_map(|i| (0..w).map(move |j| (i, j)))
        .filter(|&(i, j)| skel[(i, j)])
        .collect();
    if pixels.is_empty() {
        return Vec::new();
    }
    let degree = |i: usize, j: usize| -> usize {
        neighbors8(i, j, h, w).filter(|&(ni, nj)| skel[(ni, nj)]).count()
    };
    let mut seeds: Vec<(usize, usize)> = pixels
        .iter()
        .copied()
        .filter(|&(i, j)| degree(i, j) <= 1)
        .collect();
    if seeds.is_empty() {
        seeds.push(*pixels.iter().min().expect("non-empty"));
    }
    let mut best: Vec<(usize, usize)> = Vec::new();
    for seed in seeds {
        let path = walk_from(skel, direction, seed);
        if path.len() > best.len() {
            best = path;
        }
    }
    best
}

fn walk_from(
    skel: &Array2<bool>,
    direction: &Array2<u8>,
    seed: (usize, usize),
) -> Vec<(usize, usize)> {
    let (h, w) = skel.dim();
    let mut visited = Array2::from_elem((h, w), false);
    let mut path = vec![seed];
    visited[seed] = true;
    let mut current = seed;
    let mut last_step: Option<(isize, isize)> = None;
    loop {
        let candidates: Vec<(usize, usize)> = neighbors8(current.0, current.1, h, w)
            .filter(|&(ni, nj)| skel[(ni, nj)] && !visited[(ni, nj)])
            .collect();
        let next = match candidates.len() {
            0 => break,
            1 => candidates[0],
            _ => {
                // prefer the step closest to the local direction-bin heading,
                // falling back to the previous heading, then scan order
                let bin = direction[current];
                let target = if bin > 0 {
                    Some(bin_angle(bin))
                } else {
                    last_step.map(|(di, dj)| (dj as f64).atan2(di as f64))
                };
                match target {
                    Some(angle) => candidates
                        .iter()
                        .copied()
                        .min_by(|&a, &b| {
                            let score = |(ni, nj): (usize, usize)| {
                                let di = ni as f64 - current.0 as f64;
                                let dj = nj as f64 - current.1 as f64;
                                let step_angle = dj.atan2(di);
                                let mut diff = (step_angle - angle).abs() % std::f64::consts::TAU;
                                if diff > std::f64::consts::PI {
                                    diff = std::f64::consts::TAU - diff;
                                }
                                diff
                            };
                            score(a)
                                .partial_cmp(&score(b))
                                .unwrap()
                                .then(a.cmp(&b))
                        })
                        .unwrap(),
                    None => candidates.into_iter().min().unwrap(),
                }
            }
        };
        last_step = Some((
            next.0 as isize - current.0 as isize,
            next.1 as isize - current.1 as isize,
        ));
        visited[next] = true;
        path.push(next);
        current = next;
    }
    path
}

/// Vectorize every instance into an ordered, simplified polyline.
///
/// Per instance: skeletonize the mask, walk from an endpoint (direction bins
/// break ties), convert pixel centers to meters, and simplify. Confidence is
/// the mean foreground probability of the instance's class over its pixels
/// (1.0 when no probabilities are supplied). Single-pixel instances yield
/// one-point polylines.
pub fn trace_polylines(inputs: &TraceInputs, grid: &GridSpec, cfg: &TraceConfig) -> PolylineSet {
    let (h, w) = inputs.instance_map.dim();
    let n_inst = inputs.classes.len();
    let mut items = Vec::new();
    for id in 1..=n_inst {
        let mask = Array2::from_shape_fn((h, w), |(i, j)| {
            inputs.instance_map[(i, j)] as usize == id
        });
        if !mask.iter().any(|&m| m) {
            continue;
        }
        let class_id = inputs.classes[id - 1];
        let skel = skeletonize(&mask);
        let path = walk_skeleton(&skel, inputs.direction);
        if path.is_empty() {
            continue;
        }
        let points_m: Vec<[f64; 2]> = path.iter().map(|&(i, j)| grid.pixel_center(i, j)).collect();
        let simplified = douglas_peucker(&points_m, cfg.tolerance_m);

        let confidence = match inputs.class_probs {
            None => 1.0,
            Some(probs) => {
                let mut sum = 0.0f64;
                let mut count = 0usize;
                for i in 0..h {
                    for j in 0..w {
                        if mask[(i, j)] {
                            sum += probs[(class_id, i, j)] as f64;
                            count += 1;
                        }
                    }
                }
                if count == 0 {
                    0.0
                } else {
                    (sum / count as f64).clamp(0.0, 1.0)
                }
            }
        };
        items.push(Polyline {
            class_id,
            confidence,
            points: simplified,
        });
    }
    PolylineSet { items }
}
