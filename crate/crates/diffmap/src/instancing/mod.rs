//! Instance prediction heads over decoded semantic features, their auxiliary
//! losses, and the post-processing that turns masks into vector polylines.
//!
//! Three per-pixel MLP heads (1x1 convolution stacks) emit semantic logits
//! (with an explicit background class), an instance embedding, and lane
//! direction logits. Instances come out of density-based clustering in
//! embedding space; polylines come out of skeleton tracing plus
//! Douglas-Peucker simplification.

mod cluster;
mod trace;

pub use cluster::{cluster_instances, connected_components, ClusterConfig, ClusterResult};
pub use trace::{douglas_peucker, skeletonize, trace_polylines, TraceConfig, TraceInputs};

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Scalar};
use crate::error::{Error, Result};
use crate::mapgen::{SemanticMap, N_DIR, NUM_CLASSES};
use crate::nn::{to_tokens, Bound, Conv2d, ParamSet};

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct HeadsConfig {
    /// Input feature width (matches the decoded feature map).
    pub in_width: usize,
    /// Hidden width of the per-pixel MLPs.
    pub hidden: usize,
    /// Instance embedding dimension.
    pub embed_dim: usize,
}

impl Default for HeadsConfig {
    fn default() -> Self {
        HeadsConfig {
            in_width: 16,
            hidden: 16,
            embed_dim: 8,
        }
    }
}

/// Graph nodes produced by [`Heads::forward`].
pub struct HeadNodes {
    /// `(NUM_CLASSES + 1) x H x W`, softmax over background + classes.
    pub sem_logits: NodeId,
    /// `embed_dim x H x W`.
    pub embedding: NodeId,
    /// `(N_DIR + 1) x H x W`.
    pub dir_logits: NodeId,
}

/// Value-level head outputs (frozen forward).
#[derive(Debug, Clone)]
pub struct HeadValues<T> {
    pub sem_logits: Array3<T>,
    pub embedding: Array3<T>,
    pub dir_logits: Array3<T>,
}

pub struct Heads<T: Scalar> {
    pub cfg: HeadsConfig,
    pub params: ParamSet<T>,
    hidden: Conv2d,
    sem: Conv2d,
    emb: Conv2d,
    dir: Conv2d,
}

impl<T: Scalar> Heads<T> {
    pub fn new(cfg: HeadsConfig, seed: u64) -> Result<Self> {
        if cfg.in_width == 0 || cfg.hidden == 0 || cfg.embed_dim == 0 {
            return Err(Error::config("head widths must be >= 1"));
        }
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hidden = Conv2d::init(&mut params, &mut rng, "heads.hidden", cfg.in_width, cfg.hidden, 1, 1, 0);
        let sem = Conv2d::init(&mut params, &mut rng, "heads.sem", cfg.hidden, NUM_CLASSES + 1, 1, 1, 0);
        let emb = Conv2d::init(&mut params, &mut rng, "heads.emb", cfg.hidden, cfg.embed_dim, 1, 1, 0);
        let dir = Conv2d::init(&mut params, &mut rng, "heads.dir", cfg.hidden, N_DIR + 1, 1, 1, 0);
        Ok(Heads {
            cfg,
            params,
            hidden,
            sem,
            emb,
            dir,
        })
    }

    pub fn forward(&self, g: &mut Graph<T>, bound: &Bound, feat: NodeId) -> Result<HeadNodes> {
        let shape = g.value(feat).shape().to_vec();
        if shape.len() != 3 || shape[0] != self.cfg.in_width {
            return Err(Error::contract(format!(
                "heads expect {} x H x W features, got {shape:?}",
                self.cfg.in_width
            )));
        }
        let h = self.hidden.forward(g, bound, feat);
        let h = g.silu(h);
        Ok(HeadNodes {
            sem_logits: self.sem.forward(g, bound, h),
            embedding: self.emb.forward(g, bound, h),
            dir_logits: self.dir.forward(g, bound, h),
        })
    }

    pub fn forward_values(&self, feat: &Array3<T>) -> Result<HeadValues<T>> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, false);
        let f = g.constant(feat.clone().into_dyn());
        let nodes = self.forward(&mut g, &bound, f)?;
        Ok(HeadValues {
            sem_logits: g.value(nodes.sem_logits).clone().into_dimensionality().expect("3-d"),
            embedding: g.value(nodes.embedding).clone().into_dimensionality().expect("3-d"),
            dir_logits: g.value(nodes.dir_logits).clone().into_dimensionality().expect("3-d"),
        })
    }

    pub fn cast<U: Scalar>(&self) -> Heads<U> {
        Heads {
            cfg: self.cfg,
            params: self.params.cast(),
            hidden: self.hidden,
            sem: self.sem,
            emb: self.emb,
            dir: self.dir,
        }
    }
}

/// Mean softmax cross-entropy of the semantic head against the per-pixel
/// class indices derived from the ground truth (background = 0, overlap
/// priority divider < ped < boundary).
pub fn semantic_ce_loss<T: Scalar>(
    g: &mut Graph<T>,
    sem_logits: NodeId,
    gt: &SemanticMap,
) -> Result<NodeId> {
    let shape = g.value(sem_logits).shape().to_vec();
    if shape != vec![NUM_CLASSES + 1, gt.height(), gt.width()] {
        return Err(Error::contract(format!(
            "semantic logits shape {shape:?} does not match gt {}x{}",
            gt.height(),
            gt.width()
        )));
    }
    let target = gt.class_index_map();
    let mask = Array2::from_elem(target.dim(), true);
    Ok(g.softmax_ce_map(sem_logits, &target, &mask))
}

/// Direction cross-entropy on pixels with an instance only; an all-background
/// map yields a constant zero loss.
pub fn direction_loss<T: Scalar>(
    g: &mut Graph<T>,
    dir_logits: NodeId,
    gt: &SemanticMap,
) -> Result<NodeId> {
    let shape = g.value(dir_logits).shape().to_vec();
    if shape != vec![N_DIR + 1, gt.height(), gt.width()] {
        return Err(Error::contract(format!(
            "direction logits shape {shape:?} does not match gt {}x{}",
            gt.height(),
            gt.width()
        )));
    }
    let target = gt.direction.mapv(|v| v as usize);
    let mask = gt.instance.mapv(|v| v > 0);
    Ok(g.softmax_ce_map(dir_logits, &target, &mask))
}

/// Weights and margins of the discriminative instance-embedding loss.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct DiscriminativeConfig {
    pub delta_v: f64,
    pub delta_d: f64,
    pub w_var: f64,
    pub w_dist: f64,
    pub w_reg: f64,
}

impl Default for DiscriminativeConfig {
    fn default() -> Self {
        DiscriminativeConfig {
            delta_v: 0.5,
            delta_d: 3.0,
            w_var: 1.0,
            w_dist: 1.0,
            w_reg: 0.001,
        }
    }
}

/// Discriminative loss
/// `w_v * L_var + w_d * L_dist + w_r * L_reg` with
/// `L_var  = (1/C) sum_c (1/N_c) sum_i [|mu_c - x_i| - delta_v]_+^2`,
/// `L_dist = (1/(C(C-1))) sum_{a != b} [2 delta_d - |mu_a - mu_b|]_+^2`,
/// `L_reg  = (1/C) sum_c |mu_c|`.
/// Zero instances give a constant zero loss; `L_dist` is vacuous for `C = 1`.
pub fn discriminative_loss<T: Scalar>(
    g: &mut Graph<T>,
    embedding: NodeId,
    instance_map: &Array2<u16>,
    cfg: &DiscriminativeConfig,
) -> Result<NodeId> {
    let shape = g.value(embedding).shape().to_vec();
    if shape.len() != 3 || (shape[1], shape[2]) != instance_map.dim() {
        return Err(Error::contract(format!(
            "embedding shape {shape:?} does not match instance map {:?}",
            instance_map.dim()
        )));
    }
    let (h, w) = instance_map.dim();
    let n_inst = instance_map.iter().map(|&v| v as usize).max().unwrap_or(0);
    if n_inst == 0 {
        return Ok(g.constant(ndarray::ArrayD::from_elem(ndarray::IxDyn(&[]), T::zero())));
    }

    // pixel index lists per instance (row-major order)
    let mut pix_idx: Vec<usize> = Vec::new();
    let mut pix_inst: Vec<usize> = Vec::new();
    let mut counts = vec![0usize; n_inst];
    for i in 0..h {
        for j in 0..w {
            let id = instance_map[(i, j)] as usize;
            if id > 0 {
                pix_idx.push(i * w + j);
                pix_inst.push(id - 1);
                counts[id - 1] += 1;
            }
        }
    }

    let tokens = to_tokens(g, embedding); // (H*W, E)

    // instance means via a constant row-normalized indicator matrix
    let mut indicator = Array2::<T>::zeros((n_inst, h * w));
    for (&flat, &inst) in pix_idx.iter().zip(&pix_inst) {
        indicator[(inst, flat)] = T::from_f64(1.0 / counts[inst] as f64);
    }
    let ind = g.constant(indicator.into_dyn());
    let means = g.matmul(ind, tokens); // (C, E)

    // L_var: hinge on the distance of each instance pixel to its mean
    let mu_per_pix = g.gather_rows(means, pix_inst.clone());
    let x_pix = g.gather_rows(tokens, pix_idx.clone());
    let diff = g.sub(x_pix, mu_per_pix);
    let sq = g.square(diff);
    let dist_sq = g.sum_axis1(sq);
    let dist = g.sqrt_eps(dist_sq, 1e-12);
    let dv = g.constant(ndarray::Array1::from_elem(pix_idx.len(), T::from_f64(cfg.delta_v)).into_dyn());
    let excess = g.sub(dist, dv);
    let hinge = g.relu(excess);
    let hinge_sq = g.square(hinge);
    let weights = ndarray::Array1::from_shape_fn(pix_idx.len(), |p| {
        T::from_f64(1.0 / (n_inst as f64 * counts[pix_inst[p]] as f64))
    });
    let wnode = g.constant(weights.into_dyn());
    let weighted = g.mul(hinge_sq, wnode);
    let l_var = g.sum_all(weighted);

    // L_dist over unordered mean pairs (equals the ordered-pair normalization)
    let l_dist = if n_inst >= 2 {
        let mut ia = Vec::new();
        let mut ib = Vec::new();
        for a in 0..n_inst {
            for b in (a + 1)..n_inst {
                ia.push(a);
                ib.push(b);
            }
        }
        let ma = g.gather_rows(means, ia.clone());
        let mb = g.gather_rows(means, ib);
        let d = g.sub(ma, mb);
        let dsq = g.square(d);
        let dist_sq = g.sum_axis1(dsq);
        let dist = g.sqrt_eps(dist_sq, 1e-12);
        let margin = g.constant(
            ndarray::Array1::from_elem(ia.len(), T::from_f64(2.0 * cfg.delta_d)).into_dyn(),
        );
        let gap = g.sub(margin, dist);
        let hinge = g.relu(gap);
        let hsq = g.square(hinge);
        g.mean_all(hsq)
    } else {
        g.constant(ndarray::ArrayD::from_elem(ndarray::IxDyn(&[]), T::zero()))
    };

    // L_reg: mean norm of the means
    let msq = g.square(means);
    let mdist_sq = g.sum_axis1(msq);
    let mnorm = g.sqrt_eps(mdist_sq, 1e-12);
    let l_reg = g.mean_all(mnorm);

    let a = g.scale(l_var, cfg.w_var);
    let b = g.scale(l_dist, cfg.w_dist);
    let c = g.scale(l_reg, cfg.w_reg);
    Ok(g.add_n(&[a, b, c]))
}

/// Independent value-level reference of [`discriminative_loss`] (plain loops).
pub fn discriminative_loss_reference(
    embedding: &Array3<f64>,
    instance_map: &Array2<u16>,
    cfg: &DiscriminativeConfig,
) -> f64 {
    let (e, h, w) = embedding.dim();
    let n_inst = instance_map.iter().map(|&v| v as usize).max().unwrap_or(0);
    if n_inst == 0 {
        return 0.0;
    }
    let mut sums = vec![vec![0.0; e]; n_inst];
    let mut counts = vec![0usize; n_inst];
    for i in 0..h {
        for j in 0..w {
            let id = instance_map[(i, j)] as usize;
            if id > 0 {
                for d in 0..e {
                    sums[id - 1][d] += embedding[(d, i, j)];
                }
                counts[id - 1] += 1;
            }
        }
    }
    let means: Vec<Vec<f64>> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| s.iter().map(|v| v / c as f64).collect())
        .collect();

    let mut l_var = 0.0;
    for i in 0..h {
        for j in 0..w {
            let id = instance_map[(i, j)] as usize;
            if id == 0 {
                continue;
            }
            let mu = &means[id - 1];
            let dist: f64 = (0..e)
                .map(|d| (embedding[(d, i, j)] - mu[d]).powi(2))
                .sum::<f64>()
                .sqrt();
            let hinge = (dist - cfg.delta_v).max(0.0);
            l_var += hinge * hinge / (n_inst as f64 * counts[id - 1] as f64);
        }
    }

    let mut l_dist = 0.0;
    if n_inst >= 2 {
        for a in 0..n_inst {
            for b in 0..n_inst {
                if a == b {
                    continue;
                }
                let dist: f64 = (0..e).map(|d| (means[a][d] - means[b][d]).powi(2)).sum::<f64>().sqrt();
                let hinge = (2.0 * cfg.delta_d - dist).max(0.0);
                l_dist += hinge * hinge;
            }
        }
        l_dist /= (n_inst * (n_inst - 1)) as f64;
    }

    let l_reg = means
        .iter()
        .map(|m| m.iter().map(|v| v * v).sum::<f64>().sqrt())
        .sum::<f64>()
        / n_inst as f64;

    cfg.w_var * l_var + cfg.w_dist * l_dist + cfg.w_reg * l_reg
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridSpec;
    use rand::Rng;

    #[test]
    fn head_shapes_and_determinism() {
        let heads: Heads<f32> = Heads::new(HeadsConfig::default(), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let feat = Array3::<f32>::from_shape_simple_fn((16, 32, 16), || rng.gen_range(-1.0..1.0));
        let out = heads.forward_values(&feat).unwrap();
        assert_eq!(out.sem_logits.dim(), (4, 32, 16));
        assert_eq!(out.embedding.dim(), (8, 32, 16));
        assert_eq!(out.dir_logits.dim(), (37, 32, 16));
        let out2 = heads.forward_values(&feat).unwrap();
        assert_eq!(out.sem_logits, out2.sem_logits);
    }

    #[test]
    fn head_gradients_flow_to_all_params() {
        let heads: Heads<f64> = Heads::new(
            HeadsConfig {
                in_width: 4,
                hidden: 4,
                embed_dim: 2,
            },
            2,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let feat = Array3::<f64>::from_shape_simple_fn((4, 6, 6), || rng.gen_range(-1.0..1.0));
        let mut g = Graph::new();
        let bound = heads.params.bind(&mut g, true);
        let f = g.constant(feat.clone().into_dyn());
        let nodes = heads.forward(&mut g, &bound, f).unwrap();
        let s1 = g.square(nodes.sem_logits);
        let s2 = g.square(nodes.embedding);
        let s3 = g.square(nodes.dir_logits);
        let m1 = g.mean_all(s1);
        let m2 = g.mean_all(s2);
        let m3 = g.mean_all(s3);
        let loss = g.add_n(&[m1, m2, m3]);

        // finite-difference spot check on one weight entry
        let eval = |params: &ParamSet<f64>| {
            let mut g = Graph::new();
            let bound = params.bind(&mut g, false);
            let f = g.constant(feat.clone().into_dyn());
            let nodes = heads.forward(&mut g, &bound, f).unwrap();
            let s1 = g.square(nodes.sem_logits);
            let s2 = g.square(nodes.embedding);
            let s3 = g.square(nodes.dir_logits);
            let m1 = g.mean_all(s1);
            let m2 = g.mean_all(s2);
            let m3 = g.mean_all(s3);
            let l = g.add_n(&[m1, m2, m3]);
            g.value(l).iter().next().copied().unwrap()
        };
        let grads = g.backward(loss);
        for i in 0..heads.params.len() {
            let pid = crate::nn::ParamId(i);
            let analytic = grads.get(bound.node(pid)).expect("touched").clone();
            let hstep = 1e-6;
            let mut plus = heads.params.cast::<f64>();
            plus.value_mut(pid).as_slice_mut().unwrap()[0] += hstep;
            let mut minus = heads.params.cast::<f64>();
            minus.value_mut(pid).as_slice_mut().unwrap()[0] -= hstep;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * hstep);
            let an = analytic.as_slice().unwrap()[0];
            assert!(
                (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8) < 1e-3,
                "param {i}: fd={fd} an={an}"
            );
        }
    }

    fn tiny_gt() -> SemanticMap {
        let grid = GridSpec::new(4, 4, 0.15).unwrap();
        let mut gt = SemanticMap::empty(grid);
        gt.semantic[(0, 0, 0)] = 1;
        gt.instance[(0, 0)] = 1;
        gt.direction[(0, 0)] = 5;
        gt.semantic[(2, 1, 1)] = 1;
        gt.instance[(1, 1)] = 2;
        gt.direction[(1, 1)] = 10;
        gt
    }

    #[test]
    fn semantic_ce_analytic_cases() {
        let gt = tiny_gt();
        // uniform logits over 4 classes -> ln 4
        let mut g: Graph<f64> = Graph::new();
        let logits = g.constant(Array3::<f64>::zeros((4, 4, 4)).into_dyn());
        let loss = semantic_ce_loss(&mut g, logits, &gt).unwrap();
        let v = g.value(loss).iter().next().copied().unwrap();
        assert!((v - 4.0f64.ln()).abs() < 1e-12);

        // near-one-hot logits matching gt -> loss ~ 0
        let mut g: Graph<f64> = Graph::new();
        let target = gt.class_index_map();
        let arr = Array3::from_shape_fn((4, 4, 4), |(c, i, j)| {
            if c == target[(i, j)] {
                60.0
            } else {
                0.0
            }
        });
        let logits = g.constant(arr.into_dyn());
        let loss = semantic_ce_loss(&mut g, logits, &gt).unwrap();
        let v = g.value(loss).iter().next().copied().unwrap();
        assert!(v < 1e-12);

        // random case against an independent reference
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let arr = Array3::<f64>::from_shape_simple_fn((4, 4, 4), || rng.gen_range(-2.0..2.0));
        let mut g: Graph<f64> = Graph::new();
        let logits = g.constant(arr.clone().into_dyn());
        let loss = semantic_ce_loss(&mut g, logits, &gt).unwrap();
        let got = g.value(loss).iter().next().copied().unwrap();
        let mut expect = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                let t = target_of(&gt, i, j);
                let mx = (0..4).map(|c| arr[(c, i, j)]).fold(f64::NEG_INFINITY, f64::max);
                let lse: f64 = (0..4).map(|c| (arr[(c, i, j)] - mx).exp()).sum::<f64>().ln() + mx;
                expect += lse - arr[(t, i, j)];
            }
        }
        expect /= 16.0;
        assert!((got - expect).abs() < 1e-12);
    }

    fn target_of(gt: &SemanticMap, i: usize, j: usize) -> usize {
        gt.class_index_map()[(i, j)]
    }

    #[test]
    fn direction_loss_masks_background() {
        let gt = tiny_gt();
        // perfect logits -> ~0 on the two instance pixels
        let arr = Array3::from_shape_fn((37, 4, 4), |(c, i, j)| {
            if c == gt.direction[(i, j)] as usize {
                60.0
            } else {
                0.0
            }
        });
        let mut g: Graph<f64> = Graph::new();
        let logits = g.constant(arr.into_dyn());
        let loss = direction_loss(&mut g, logits, &gt).unwrap();
        assert!(g.value(loss).iter().next().copied().unwrap() < 1e-12);

        // all-background gt -> defined zero
        let empty = SemanticMap::empty(GridSpec::new(4, 4, 0.15).unwrap());
        let mut g: Graph<f64> = Graph::new();
        let logits = g.constant(Array3::<f64>::zeros((37, 4, 4)).into_dyn());
        let loss = direction_loss(&mut g, logits, &empty).unwrap();
        assert_eq!(g.value(loss).iter().next().copied().unwrap(), 0.0);
    }

    #[test]
    fn discriminative_loss_hand_cases() {
        let cfg = DiscriminativeConfig {
            delta_v: 0.5,
            delta_d: 1.0,
            w_var: 1.0,
            w_dist: 1.0,
            w_reg: 0.0,
        };
        // two instances with point embeddings at (0,0) and (1,0):
        // L_dist = (2*1 - 1)^2 = 1, L_var = 0 -> total 1  (delta_d = 1)
        let mut emb = Array3::<f64>::zeros((2, 1, 2));
        emb[(0, 0, 0)] = 0.0;
        emb[(0, 0, 1)] = 1.0;
        let mut inst = Array2::<u16>::zeros((1, 2));
        inst[(0, 0)] = 1;
        inst[(0, 1)] = 2;
        let mut g: Graph<f64> = Graph::new();
        let e = g.constant(emb.clone().into_dyn());
        let loss = discriminative_loss(&mut g, e, &inst, &cfg).unwrap();
        let v = g.value(loss).iter().next().copied().unwrap();
        assert!((v - 1.0).abs() < 1e-6, "got {v}");
        assert!((discriminative_loss_reference(&emb, &inst, &cfg) - 1.0).abs() < 1e-9);

        // single instance, uniform embedding, zero mean norm -> 0
        let emb = Array3::<f64>::zeros((2, 2, 2));
        let inst = Array2::<u16>::ones((2, 2));
        let mut g: Graph<f64> = Graph::new();
        let e = g.constant(emb.clone().into_dyn());
        let loss = discriminative_loss(&mut g, e, &inst, &cfg).unwrap();
        assert!(g.value(loss).iter().next().copied().unwrap() < 1e-9);

        // no instances -> 0
        let inst = Array2::<u16>::zeros((2, 2));
        let mut g: Graph<f64> = Graph::new();
        let e = g.constant(emb.into_dyn());
        let loss = discriminative_loss(&mut g, e, &inst, &cfg).unwrap();
        assert_eq!(g.value(loss).iter().next().copied().unwrap(), 0.0);
    }

    #[test]
    fn discriminative_loss_matches_reference_on_random_inputs() {
        let cfg = DiscriminativeConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..10 {
            let emb = Array3::<f64>::from_shape_simple_fn((4, 6, 6), || rng.gen_range(-2.0..2.0));
            let inst = Array2::<u16>::from_shape_fn((6, 6), |_| rng.gen_range(0..4u16));
            // make ids contiguous: remap seen ids
            let inst = contiguous(&inst);
            let mut g: Graph<f64> = Graph::new();
            let e = g.constant(emb.clone().into_dyn());
            let loss = discriminative_loss(&mut g, e, &inst, &cfg).unwrap();
            let got = g.value(loss).iter().next().copied().unwrap();
            let want = discriminative_loss_reference(&emb, &inst, &cfg);
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
    }

    fn contiguous(inst: &Array2<u16>) -> Array2<u16> {
        let mut map = std::collections::BTreeMap::new();
        let mut next = 0u16;
        inst.mapv(|v| {
            if v == 0 {
                0
            } else {
                *map.entry(v).or_insert_with(|| {
                    next += 1;
                    next
                })
            }
        })
    }

    #[test]
    fn discriminative_loss_translation_invariant_without_reg() {
        let cfg = DiscriminativeConfig {
            w_reg: 0.0,
            ..DiscriminativeConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let emb = Array3::<f64>::from_shape_simple_fn((3, 5, 5), || rng.gen_range(-1.0..1.0));
        let mut inst = Array2::<u16>::zeros((5, 5));
        for i in 0..5 {
            for j in 0..5 {
                inst[(i, j)] = ((i * 5 + j) % 3) as u16; // ids 0..2, 0 = background
            }
        }
        let shifted = &emb + 13.7;
        let a = discriminative_loss_reference(&emb, &inst, &cfg);
        let b = discriminative_loss_reference(&shifted, &inst, &cfg);
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn discriminative_loss_gradient_matches_finite_differences() {
        let cfg = DiscriminativeConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let emb = Array3::<f64>::from_shape_simple_fn((3, 4, 4), || rng.gen_range(-1.5..1.5));
        let mut inst = Array2::<u16>::zeros((4, 4));
        for i in 0..4 {
            for j in 0..4 {
                if (i + j) % 3 != 0 {
                    inst[(i, j)] = 1 + ((i + 2 * j) % 2) as u16;
                }
            }
        }
        let mut g: Graph<f64> = Graph::new();
        let e = g.leaf(emb.clone().into_dyn());
        let loss = discriminative_loss(&mut g, e, &inst, &cfg).unwrap();
        let grads = g.backward(loss);
        let analytic = grads.get(e).unwrap().clone();

        let h = 1e-6;
        for flat in 0..emb.len() {
            let mut plus = emb.clone();
            plus.as_slice_mut().unwrap()[flat] += h;
            let mut minus = emb.clone();
            minus.as_slice_mut().unwrap()[flat] -= h;
            let fd = (discriminative_loss_reference(&plus, &inst, &cfg)
                - discriminative_loss_reference(&minus, &inst, &cfg))
                / (2.0 * h);
            let an = analytic.as_slice().unwrap()[flat];
            assert!(
                (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6) < 1e-4,
                "flat {flat}: fd={fd} an={an}"
            );
        }
    }
}
