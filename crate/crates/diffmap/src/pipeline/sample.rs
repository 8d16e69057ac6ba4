//! Refinement inference: run several independent reverse chains from pure
//! noise under the BEV condition, decode, average, and vectorize.

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{derive_seed, DiffmapModels, PAD_MULTIPLE};
use crate::autodiff::Scalar;
use crate::diffusion::{sampler_step, sampling_timesteps};
use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::instancing::{
    cluster_instances, trace_polylines, ClusterConfig, HeadValues, TraceConfig, TraceInputs,
};
use crate::mapgen::{crop_padding, pad_to_multiple, PolylineSet, SemanticMap, NUM_CLASSES};

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct SampleMapConfig {
    /// Reverse-chain length (uniform stride over the training schedule).
    pub steps: usize,
    /// Independent chains averaged into the final prediction.
    pub n_samples: usize,
    /// Stochasticity of the sampler update (0 = deterministic).
    pub eta: f64,
    /// Fusion weight between the latent branch and the noise-branch
    /// inversion when forming the clean estimate.
    pub lambda: f64,
    pub seed: u64,
    /// Average chains in latent space instead of decoded feature space.
    pub average_latents: bool,
    pub cluster: ClusterConfig,
    pub trace: TraceConfig,
}

impl Default for SampleMapConfig {
    fn default() -> Self {
        SampleMapConfig {
            steps: 20,
            n_samples: 3,
            eta: 0.0,
            lambda: 0.5,
            seed: 0,
            average_latents: false,
            cluster: ClusterConfig::default(),
            trace: TraceConfig::default(),
        }
    }
}

/// Inference output: the labeled map, per-class probabilities, vectorized
/// instances, and the baseline's own semantic argmax for comparison figures.
pub struct Prediction {
    pub map: SemanticMap,
    /// Sigmoid of the decoded mask logits, `NUM_CLASSES x H x W` in `[0, 1]`.
    pub probs: Array3<f32>,
    pub polylines: PolylineSet,
    /// Semantic masks the baseline heads alone would predict.
    pub baseline_semantic: Array3<u8>,
}

/// Run the full refinement: condition once, run `n_samples` reverse chains,
/// decode, average, apply heads, threshold at 0.5, cluster and trace.
pub fn sample_map(
    observation: &Array3<f32>,
    grid: &GridSpec,
    models: &DiffmapModels,
    cfg: &SampleMapConfig,
) -> Result<Prediction> {
    if cfg.steps == 0 || cfg.n_samples == 0 {
        return Err(Error::config("steps and n_samples must be >= 1"));
    }
    models.validate()?;
    let (obs_p, pad) = pad_to_multiple(observation, PAD_MULTIPLE);
    let (ph, pw) = (obs_p.dim().1, obs_p.dim().2);
    let f = models.vq.cfg.factor;
    let latent_shape = (models.vq.cfg.latent_dim, ph / f, pw / f);

    // condition computed once per observation
    let (bev, feat_base) = models.baseline.forward_values(&obs_p)?;

    let mut final_latents: Vec<Array3<f32>> = Vec::with_capacity(cfg.n_samples);
    for chain in 0..cfg.n_samples {
        let chain_seed = derive_seed(cfg.seed, "chain", chain as u64);
        final_latents.push(run_chain(models, &bev, latent_shape, cfg, chain_seed)?);
    }

    // decode and average
    let (feat_p, logits_p) = if cfg.average_latents {
        let mut mean = Array3::<f32>::zeros(latent_shape);
        for z in &final_latents {
            mean += z;
        }
        mean.mapv_inplace(|v| v / cfg.n_samples as f32);
        models.vq.decode_values(&mean)?
    } else {
        let mut feat_sum: Option<Array3<f32>> = None;
        let mut logit_sum: Option<Array3<f32>> = None;
        for z in &final_latents {
            let (feat, logits) = models.vq.decode_values(z)?;
            match (&mut feat_sum, &mut logit_sum) {
                (Some(fs), Some(ls)) => {
                    *fs += &feat;
                    *ls += &logits;
                }
                _ => {
                    feat_sum = Some(feat);
                    logit_sum = Some(logits);
                }
            }
        }
        let mut feat = feat_sum.expect("n_samples >= 1");
        let mut logits = logit_sum.expect("n_samples >= 1");
        feat.mapv_inplace(|v| v / cfg.n_samples as f32);
        logits.mapv_inplace(|v| v / cfg.n_samples as f32);
        (feat, logits)
    };

    // crop padding away, then run the per-pixel stages on the original grid
    let feat = crop_padding(&feat_p, pad);
    let logits = crop_padding(&logits_p, pad);
    let feat_base = crop_padding(&feat_base, pad);
    let (h, w) = (logits.dim().1, logits.dim().2);

    let probs = logits.mapv(|v| 1.0 / (1.0 + (-v).exp()));
    let semantic = probs.mapv(|p| (p > 0.5) as u8);

    let head_values: HeadValues<f32> = models.heads.forward_values(&feat)?;
    let clusters = cluster_instances(&semantic, &head_values.embedding, &cfg.cluster);

    // direction bins from the head, only on instance pixels
    let mut direction = Array2::<u8>::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            if clusters.instance_map[(i, j)] == 0 {
                continue;
            }
            let mut best = 0usize;
            let mut best_v = f32::NEG_INFINITY;
            for c in 0..head_values.dir_logits.dim().0 {
                let v = head_values.dir_logits[(c, i, j)];
                if v > best_v {
                    best_v = v;
                    best = c;
                }
            }
            direction[(i, j)] = best as u8;
        }
    }

    let map = SemanticMap {
        semantic,
        instance: clusters.instance_map.clone(),
        direction,
        grid: *grid,
    };

    // foreground softmax probabilities of the semantic head feed confidences
    let sem_soft = softmax_channels(&head_values.sem_logits);
    let fg_probs = sem_soft.slice(ndarray::s![1.., .., ..]).to_owned();
    let polylines = trace_polylines(
        &TraceInputs {
            instance_map: &map.instance,
            classes: &clusters.classes,
            direction: &map.direction,
            class_probs: Some(&fg_probs),
        },
        grid,
        &cfg.trace,
    );

    // baseline heads on the baseline feature map, argmax semantics
    let base_heads: HeadValues<f32> = models.heads.forward_values(&feat_base)?;
    let base_soft = softmax_channels(&base_heads.sem_logits);
    let mut baseline_semantic = Array3::<u8>::zeros((NUM_CLASSES, h, w));
    for i in 0..h {
        for j in 0..w {
            let mut best = 0usize;
            let mut best_v = f32::NEG_INFINITY;
            for c in 0..=NUM_CLASSES {
                if base_soft[(c, i, j)] > best_v {
                    best_v = base_soft[(c, i, j)];
                    best = c;
                }
            }
            if best > 0 {
                baseline_semantic[(best - 1, i, j)] = 1;
            }
        }
    }

    Ok(Prediction {
        map,
        probs,
        polylines,
        baseline_semantic,
    })
}

/// One reverse chain from pure noise to a clean latent under a fixed seed.
pub fn run_chain(
    models: &DiffmapModels,
    bev: &Array3<f32>,
    latent_shape: (usize, usize, usize),
    cfg: &SampleMapConfig,
    chain_seed: u64,
) -> Result<Array3<f32>> {
    let pairs = sampling_timesteps(models.schedule.steps, cfg.steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(chain_seed);
    let mut z = Array3::<f32>::from_shape_simple_fn(latent_shape, || f32::standard_normal(&mut rng));
    for &(t, t_prev) in &pairs {
        let (eps_hat, z_hat) = models.denoiser.forward_values(&z, t, bev)?;
        let noise = if cfg.eta > 0.0 && t_prev > 0 {
            Some(
                Array3::<f32>::from_shape_simple_fn(latent_shape, || f32::standard_normal(&mut rng))
                    .into_dyn(),
            )
        } else {
            None
        };
        let next = sampler_step(
            &z.clone().into_dyn(),
            &z_hat.into_dyn(),
            &eps_hat.into_dyn(),
            t,
            t_prev,
            cfg.eta,
            cfg.lambda,
            &models.schedule,
            noise.as_ref(),
        )?;
        z = next.into_dimensionality().expect("latent rank");
    }
    Ok(z)
}

fn softmax_channels(logits: &Array3<f32>) -> Array3<f32> {
    let (c, h, w) = logits.dim();
    let mut out = Array3::<f32>::zeros((c, h, w));
    for i in 0..h {
        for j in 0..w {
            let mut mx = f32::NEG_INFINITY;
            for ci in 0..c {
                mx = mx.max(logits[(ci, i, j)]);
            }
            let mut sum = 0.0;
            for ci in 0..c {
                let e = (logits[(ci, i, j)] - mx).exp();
                out[(ci, i, j)] = e;
                sum += e;
            }
            for ci in 0..c {
                out[(ci, i, j)] /= sum;
            }
        }
    }
    out
}
