//! Instance extraction: density-based clustering of class-mask pixels in
//! embedding space (DBSCAN with a fixed row-major scan order, so results are
//! deterministic). Connected components of a mask get split when their
//! embeddings separate and merged when different components share an
//! embedding neighborhood.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::autodiff::Scalar;
use crate::mapgen::NUM_CLASSES;

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct ClusterConfig {
    /// Embedding-space neighborhood radius.
    pub eps: f64,
    /// Minimum neighborhood size for a core point.
    pub min_pts: usize,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig { eps: 1.5, min_pts: 4 }
    }
}

/// Instance map plus the class of each instance id (`classes[id - 1]`).
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterResult {
    pub instance_map: Array2<u16>,
    pub classes: Vec<usize>,
}

/// 8-connected components of a binary mask, labeled in row-major discovery
/// order from 1. Returns the label map and the component count.
pub fn connected_components(mask: &Array2<bool>) -> (Array2<u32>, usize) {
    let (h, w) = mask.dim();
    let mut labels = Array2::<u32>::zeros((h, w));
    let mut next = 0u32;
    let mut queue = std::collections::VecDeque::new();
    for i in 0..h {
        for j in 0..w {
            if !mask[(i, j)] || labels[(i, j)] != 0 {
                continue;
            }
            next += 1;
            labels[(i, j)] = next;
            queue.push_back((i, j));
            while let Some((ci, cj)) = queue.pop_front() {
                for di in -1isize..=1 {
                    for dj in -1isize..=1 {
                        if di == 0 && dj == 0 {
                            continue;
                        }
                        let ni = ci as isize + di;
                        let nj = cj as isize + dj;
                        if ni < 0 || nj < 0 || ni >= h as isize || nj >= w as isize {
                            continue;
                        }
                        let (ni, nj) = (ni as usize, nj as usize);
                        if mask[(ni, nj)] && labels[(ni, nj)] == 0 {
                            labels[(ni, nj)] = next;
                            queue.push_back((ni, nj));
                        }
                    }
                }
            }
        }
    }
    (labels, next as usize)
}

/// Cluster per-class mask pixels by embedding distance into instances.
///
/// Output IDs are contiguous from 1 across all classes; noise pixels (never
/// reaching a core point) stay background.
pub fn cluster_instances<T: Scalar>(
    sem_masks: &Array3<u8>,
    embedding: &Array3<T>,
    cfg: &ClusterConfig,
) -> ClusterResult {
    let (c, h, w) = sem_masks.dim();
    assert_eq!(c, NUM_CLASSES, "expected one mask per class");
    assert_eq!((embedding.dim().1, embedding.dim().2), (h, w), "embedding grid mismatch");
    let e_dim = embedding.dim().0;

    let mut instance_map = Array2::<u16>::zeros((h, w));
    let mut classes = Vec::new();
    let mut next_id = 0u16;

    for class_id in 0..c {
        // masked pixels in row-major order
        let mut pixels: Vec<(usize, usize)> = Vec::new();
        for i in 0..h {
            for j in 0..w {
                if sem_masks[(class_id, i, j)] > 0 {
                    pixels.push((i, j));
                }
            }
        }
        if pixels.is_empty() {
            continue;
        }
        let n = pixels.len();
        let emb: Vec<Vec<f64>> = pixels
            .iter()
            .map(|&(i, j)| (0..e_dim).map(|d| embedding[(d, i, j)].to_f64()).collect())
            .collect();
        let eps_sq = cfg.eps * cfg.eps;
        let dist_sq = |a: &[f64], b: &[f64]| -> f64 {
            a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
        };
        let neighbors = |p: usize| -> Vec<usize> {
            (0..n).filter(|&q| dist_sq(&emb[p], &emb[q]) <= eps_sq).collect()
        };

        // DBSCAN, fixed seed order
        const UNVISITED: i32 = -2;
        const NOISE: i32 = -1;
        let mut label = vec![UNVISITED; n];
        let mut local_clusters = 0i32;
        for p in 0..n {
            if label[p] != UNVISITED {
                continue;
            }
            let nb = neighbors(p);
            if nb.len() < cfg.min_pts {
                label[p] = NOISE;
                continue;
            }
            let cluster = local_clusters;
            local_clusters += 1;
            label[p] = cluster;
            let mut queue: std::collections::VecDeque<usize> = nb.into();
            while let Some(q) = queue.pop_front() {
                if label[q] == NOISE {
                    label[q] = cluster; // border point
                }
                if label[q] != UNVISITED {
                    continue;
                }
                label[q] = cluster;
                let qn = neighbors(q);
                if qn.len() >= cfg.min_pts {
                    queue.extend(qn);
                }
            }
        }

        for cluster in 0..local_clusters {
            next_id += 1;
            classes.push(class_id);
            for (p, &(i, j)) in pixels.iter().enumerate() {
                if label[p] == cluster {
                    instance_map[(i, j)] = next_id;
                }
            }
        }
    }

    ClusterResult {
        instance_map,
        classes,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn embed_const(values: &[(usize, usize, f64)], h: usize, w: usize) -> Array3<f64> {
        let mut e = Array3::<f64>::zeros((2, h, w));
        for &(i, j, v) in values {
            e[(0, i, j)] = v;
        }
        e
    }

    #[test]
    fn components_count_and_labels() {
        let mut mask = Array2::from_elem((5, 5), false);
        mask[(0, 0)] = true;
        mask[(0, 1)] = true;
        mask[(1, 1)] = true; // component 1 (8-connected)
        mask[(4, 4)] = true; // component 2
        let (labels, n) = connected_components(&mask);
        assert_eq!(n, 2);
        assert_eq!(labels[(0, 0)], 1);
        assert_eq!(labels[(1, 1)], 1);
        assert_eq!(labels[(4, 4)], 2);
        assert_eq!(labels[(2, 2)], 0);
    }

    #[test]
    fn disjoint_components_with_separated_embeddings_are_two_instances() {
        let (h, w) = (4, 8);
        let mut masks = Array3::<u8>::zeros((NUM_CLASSES, h, w));
        for i in 0..h {
            masks[(0, i, 0)] = 1;
            masks[(0, i, 7)] = 1;
        }
        let mut values = Vec::new();
        for i in 0..h {
            values.push((i, 0, 0.0));
            values.push((i, 7, 10.0));
        }
        let emb = embed_const(&values, h, w);
        let res = cluster_instances(&masks, &emb, &ClusterConfig { eps: 1.0, min_pts: 2 });
        assert_eq!(res.classes, vec![0, 0]);
        assert_eq!(res.instance_map[(0, 0)], 1);
        assert_eq!(res.instance_map[(0, 7)], 2);
    }

    #[test]
    fn one_component_split_by_embedding_gap() {
        // a single horizontal bar whose left/right halves are far apart in
        // embedding space
        let (h, w) = (1, 8);
        let mut masks = Array3::<u8>::zeros((NUM_CLASSES, h, w));
        for j in 0..8 {
            masks[(1, 0, j)] = 1;
        }
        let mut values = Vec::new();
        for j in 0..4 {
            values.push((0, j, 0.0));
        }
        for j in 4..8 {
            values.push((0, j, 5.0));
        }
        let emb = embed_const(&values, h, w);
        let res = cluster_instances(&masks, &emb, &ClusterConfig { eps: 1.0, min_pts: 2 });
        assert_eq!(res.classes.len(), 2, "split expected");
        assert_ne!(res.instance_map[(0, 0)], res.instance_map[(0, 7)]);

        // oracle: exhaustive single-linkage components in embedding space
        // (min_pts = 1 semantics)
        let res1 = cluster_instances(&masks, &emb, &ClusterConfig { eps: 1.0, min_pts: 1 });
        let mut adj_clusters = std::collections::BTreeSet::new();
        for j in 0..8 {
            adj_clusters.insert(res1.instance_map[(0, j)]);
        }
        assert_eq!(adj_clusters.len(), 2);
    }

    #[test]
    fn merged_components_with_close_embeddings() {
        // two disjoint mask components with identical embeddings merge
        let (h, w) = (1, 8);
        let mut masks = Array3::<u8>::zeros((NUM_CLASSES, h, w));
        for j in [0, 1, 2, 5, 6, 7] {
            masks[(2, 0, j)] = 1;
        }
        let emb = Array3::<f64>::zeros((2, h, w));
        let res = cluster_instances(&masks, &emb, &ClusterConfig { eps: 0.5, min_pts: 2 });
        assert_eq!(res.classes.len(), 1, "expected a single merged instance");
        assert_eq!(res.instance_map[(0, 0)], res.instance_map[(0, 7)]);
    }

    #[test]
    fn empty_mask_empty_result() {
        let masks = Array3::<u8>::zeros((NUM_CLASSES, 4, 4));
        let emb = Array3::<f64>::zeros((2, 4, 4));
        let res = cluster_instances(&masks, &emb, &ClusterConfig::default());
        assert!(res.classes.is_empty());
        assert!(res.instance_map.iter().all(|&v| v == 0));
    }

    #[test]
    fn ids_contiguous_and_inside_mask() {
        // random-ish fixture across two classes
        let (h, w) = (6, 6);
        let mut masks = Array3::<u8>::zeros((NUM_CLASSES, h, w));
        for j in 0..6 {
            masks[(0, 1, j)] = 1;
            masks[(2, 4, j)] = 1;
        }
        let mut emb = Array3::<f64>::zeros((2, h, w));
        for j in 0..6 {
            emb[(0, 1, j)] = if j < 3 { 0.0 } else { 8.0 };
            emb[(0, 4, j)] = 1.0;
        }
        let res = cluster_instances(&masks, &emb, &ClusterConfig { eps: 1.0, min_pts: 2 });
        let max_id = res.instance_map.iter().copied().max().unwrap() as usize;
        assert_eq!(max_id, res.classes.len());
        // every labeled pixel lies in the mask of its class
        for i in 0..h {
            for j in 0..w {
                let id = res.instance_map[(i, j)];
                if id > 0 {
                    let cls = res.classes[id as usize - 1];
                    assert_eq!(masks[(cls, i, j)], 1);
                }
            }
        }
        // ids 1..=max all present
        let mut seen = vec![false; max_id + 1];
        for &v in res.instance_map.iter() {
            seen[v as usize] = true;
        }
        assert!(seen[1..].iter().all(|&s| s));
    }
}
