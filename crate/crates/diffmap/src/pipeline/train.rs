//! The two training stages.
//!
//! Stage one fits the VQ-VAE on clean ground-truth rasters only. Stage two
//! freezes the VQ-VAE, then jointly trains the baseline encoder (condition
//! provider and auxiliary supervisor), the two-branch denoiser, and the
//! instance heads: per step the clean latent is noised with a uniformly drawn
//! step index, the denoiser predicts both branches under the BEV condition,
//! and auxiliary losses read features decoded from the predicted latent.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{derive_seed, DiffmapModels, TrainConfig, PAD_MULTIPLE};
use crate::autodiff::{Graph, Scalar};
use crate::baseline::{Baseline, BaselineConfig};
use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::diffusion::{q_sample, NoiseSchedule};
use crate::error::{Error, Result};
use crate::instancing::{
    direction_loss, discriminative_loss, semantic_ce_loss, DiscriminativeConfig, Heads,
    HeadsConfig,
};
use crate::mapgen::{pad_semantic_map, pad_to_multiple, MapSample, NUM_CLASSES};
use crate::nn::{AdamW, GradAccum, ParamId};
use crate::vq::{vq_training_graph, VqConfig, VqVae};

/// Per-step VQ loss record.
#[derive(Debug, Clone, Copy)]
pub struct VqStepLoss {
    pub step: usize,
    pub total: f64,
    pub recon: f64,
    pub vq: f64,
    pub commit: f64,
}

pub struct VqTrainOutput {
    pub model: VqVae<f32>,
    pub losses: Vec<VqStepLoss>,
}

/// Deterministic index stream: reshuffled epochs of `0..n`.
struct IndexStream {
    rng: ChaCha8Rng,
    n: usize,
    pool: Vec<usize>,
}

impl IndexStream {
    fn new(n: usize, seed: u64) -> Self {
        IndexStream {
            rng: ChaCha8Rng::seed_from_u64(seed),
            n,
            pool: Vec::new(),
        }
    }

    fn next_batch(&mut self, k: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if self.pool.is_empty() {
                let mut epoch: Vec<usize> = (0..self.n).collect();
                // Fisher-Yates with the stream RNG
                for i in (1..epoch.len()).rev() {
                    let j = self.rng.gen_range(0..=i);
                    epoch.swap(i, j);
                }
                self.pool = epoch;
            }
            out.push(self.pool.remove(0));
        }
        out
    }
}

fn check_finite(step: usize, name: &str, v: f64) -> Result<()> {
    if !v.is_finite() {
        return Err(Error::Diverged(format!("{name} loss became {v} at step {step}")));
    }
    Ok(())
}

/// Train a VQ-VAE on the clean ground-truth rasters of `samples`.
pub fn train_vqvae(
    samples: &[MapSample],
    vq_cfg: VqConfig,
    train: &TrainConfig,
) -> Result<VqTrainOutput> {
    train.validate()?;
    vq_cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::data("empty training set".to_string()));
    }
    let rasters: Vec<Array3<f32>> = samples
        .iter()
        .map(|s| pad_to_multiple(&s.gt.semantic.mapv(|v| v as f32), PAD_MULTIPLE).0)
        .collect();

    let mut model = VqVae::<f32>::new(vq_cfg, NUM_CLASSES, derive_seed(train.seed, "vq-init", 0))?;
    let mut opt = AdamW::new(&model.params, train.lr, train.weight_decay);
    let mut stream = IndexStream::new(rasters.len(), derive_seed(train.seed, "vq-order", 0));
    let mut losses = Vec::with_capacity(train.steps);

    for step in 0..train.steps {
        let batch = stream.next_batch(train.batch_size);
        let mut acc = GradAccum::new(&model.params);
        let mut sums = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
        for &idx in &batch {
            let mut g: Graph<f32> = Graph::new();
            let bound = model.params.bind(&mut g, true);
            let nodes = vq_training_graph(&model, &mut g, &bound, &rasters[idx])?;
            let scalar = |id| g.value(id).iter().next().copied().unwrap_or(0.0) as f64;
            sums.0 += scalar(nodes.total);
            sums.1 += scalar(nodes.recon);
            sums.2 += scalar(nodes.vq);
            sums.3 += scalar(nodes.commit);
            let mut grads = g.backward(nodes.total);
            acc.add(&bound, &mut grads);
        }
        let k = batch.len() as f64;
        let rec = VqStepLoss {
            step,
            total: sums.0 / k,
            recon: sums.1 / k,
            vq: sums.2 / k,
            commit: sums.3 / k,
        };
        check_finite(step, "vq total", rec.total)?;
        let lr = train.lr_schedule.lr_at(train.lr, step, train.steps);
        opt.step(&mut model.params, &acc.mean(), lr);
        losses.push(rec);
    }
    Ok(VqTrainOutput { model, losses })
}

/// Per-step diffusion loss record (batch means).
#[derive(Debug, Clone, Copy)]
pub struct DiffusionStepLoss {
    pub step: usize,
    pub total: f64,
    pub diff: f64,
    pub ce: f64,
    pub disc: f64,
    pub dir: f64,
}

pub struct DiffusionTrainOutput {
    pub models: DiffmapModels,
    pub losses: Vec<DiffusionStepLoss>,
}

/// Architecture knobs of the diffusion stage (the VQ-VAE arrives frozen from
/// stage one).
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DiffusionArch {
    pub baseline: BaselineConfig,
    pub denoiser: DenoiserConfig,
    pub heads: HeadsConfig,
    pub discriminative: DiscriminativeConfig,
    pub schedule: NoiseSchedule,
}

impl DiffusionArch {
    /// Defaults consistent with the given VQ model.
    pub fn for_vq(vq: &VqConfig) -> Self {
        let baseline = BaselineConfig {
            feat_width: vq.feat_width,
            ..BaselineConfig::default()
        };
        DiffusionArch {
            baseline,
            denoiser: DenoiserConfig {
                latent_dim: vq.latent_dim,
                ..DenoiserConfig::default()
            },
            heads: HeadsConfig {
                in_width: vq.feat_width,
                ..HeadsConfig::default()
            },
            discriminative: DiscriminativeConfig::default(),
            schedule: NoiseSchedule::default_linear(),
        }
    }
}

/// Train the conditional diffusion stage against a frozen VQ-VAE.
pub fn train_diffusion(
    samples: &[MapSample],
    vq: VqVae<f32>,
    arch: DiffusionArch,
    train: &TrainConfig,
) -> Result<DiffusionTrainOutput> {
    train.validate()?;
    if samples.is_empty() {
        return Err(Error::data("empty training set".to_string()));
    }

    let baseline = Baseline::<f32>::new(arch.baseline, NUM_CLASSES, derive_seed(train.seed, "base-init", 0))?;
    let denoiser = Denoiser::<f32>::new(
        arch.denoiser,
        arch.baseline.bev_channels,
        derive_seed(train.seed, "unet-init", 0),
    )?;
    let heads = Heads::<f32>::new(arch.heads, derive_seed(train.seed, "heads-init", 0))?;
    let mut models = DiffmapModels {
        vq,
        baseline,
        denoiser,
        heads,
        schedule: arch.schedule,
    };
    models.validate()?;

    // Precompute padded rasters and frozen clean latents.
    let mut observations = Vec::with_capacity(samples.len());
    let mut gts = Vec::with_capacity(samples.len());
    let mut latents = Vec::with_capacity(samples.len());
    for s in samples {
        let (obs, _) = pad_to_multiple(&s.observation, PAD_MULTIPLE);
        let (gt, _) = pad_semantic_map(&s.gt, PAD_MULTIPLE);
        let x = gt.semantic.mapv(|v| v as f32);
        latents.push(models.vq.encode_quantized(&x)?);
        observations.push(obs);
        gts.push(gt);
    }
    let latent_shape = latents[0].dim();
    let div = 1usize << models.denoiser.cfg.depth;
    if latent_shape.1 % div != 0 || latent_shape.2 % div != 0 {
        return Err(Error::config(format!(
            "latent {}x{} from factor {} is incompatible with denoiser depth {}",
            latent_shape.1, latent_shape.2, models.vq.cfg.factor, models.denoiser.cfg.depth
        )));
    }

    let total_steps = models.schedule.steps;
    let weights = train.loss_weights;
    let mut stream = IndexStream::new(samples.len(), derive_seed(train.seed, "diff-order", 0));
    let mut noise_rng = ChaCha8Rng::seed_from_u64(derive_seed(train.seed, "diff-noise", 0));

    // one optimizer per parameter set, stepped together
    let mut opt_base = AdamW::new(&models.baseline.params, train.lr, train.weight_decay);
    let mut opt_unet = AdamW::new(&models.denoiser.params, train.lr, train.weight_decay);
    let mut opt_heads = AdamW::new(&models.heads.params, train.lr, train.weight_decay);

    let mut losses = Vec::with_capacity(train.steps);
    for step in 0..train.steps {
        let batch = stream.next_batch(train.batch_size);
        let mut acc_base = GradAccum::new(&models.baseline.params);
        let mut acc_unet = GradAccum::new(&models.denoiser.params);
        let mut acc_heads = GradAccum::new(&models.heads.params);
        let mut sums = DiffusionStepLoss {
            step,
            total: 0.0,
            diff: 0.0,
            ce: 0.0,
            disc: 0.0,
            dir: 0.0,
        };
        for &idx in &batch {
            let t = noise_rng.gen_range(1..=total_steps);
            let eps = Array3::<f32>::from_shape_simple_fn(latent_shape, || {
                f32::standard_normal(&mut noise_rng)
            });
            let z_t = q_sample(&latents[idx].clone().into_dyn(), t, &eps.clone().into_dyn(), &models.schedule)?;

            let mut g: Graph<f32> = Graph::new();
            let b_base = models.baseline.params.bind(&mut g, true);
            let b_unet = models.denoiser.params.bind(&mut g, true);
            let b_heads = models.heads.params.bind(&mut g, true);
            let b_vq = models.vq.params.bind(&mut g, false); // frozen

            let obs_node = g.constant(observations[idx].clone().into_dyn());
            let (bev, feat_base) = models.baseline.forward(&mut g, &b_base, obs_node)?;
            let z_t_node = g.constant(z_t.clone());
            let (eps_hat, z_hat) = models.denoiser.forward(&mut g, &b_unet, z_t_node, t, bev)?;

            // two-branch reconstruction objective
            let z0_node = g.constant(latents[idx].clone().into_dyn());
            let eps_node = g.constant(eps.clone().into_dyn());
            let l_z = g.mse(z_hat, z0_node);
            let l_eps = g.mse(eps_hat, eps_node);
            let l_diff = g.add(l_z, l_eps);

            // auxiliary losses on features decoded from the predicted latent
            let (feat_dec, _logits_dec) = models.vq.decode(&mut g, &b_vq, z_hat)?;
            let heads_dec = models.heads.forward(&mut g, &b_heads, feat_dec)?;
            let gt = &gts[idx];
            let mut l_ce = semantic_ce_loss(&mut g, heads_dec.sem_logits, gt)?;
            let mut l_disc =
                discriminative_loss(&mut g, heads_dec.embedding, &gt.instance, &arch.discriminative)?;
            let mut l_dir = direction_loss(&mut g, heads_dec.dir_logits, gt)?;

            // the baseline supervises itself through the same heads
            if train.baseline_supervision {
                let heads_base = models.heads.forward(&mut g, &b_heads, feat_base)?;
                let ce_b = semantic_ce_loss(&mut g, heads_base.sem_logits, gt)?;
                let disc_b =
                    discriminative_loss(&mut g, heads_base.embedding, &gt.instance, &arch.discriminative)?;
                let dir_b = direction_loss(&mut g, heads_base.dir_logits, gt)?;
                l_ce = g.add(l_ce, ce_b);
                l_disc = g.add(l_disc, disc_b);
                l_dir = g.add(l_dir, dir_b);
            }

            let wd = g.scale(l_diff, weights.w_diff);
            let wc = g.scale(l_ce, weights.w_ce);
            let wi = g.scale(l_disc, weights.w_disc);
            let wr = g.scale(l_dir, weights.w_dir);
            let total = g.add_n(&[wd, wc, wi, wr]);

            let scalar = |g: &Graph<f32>, id| g.value(id).iter().next().copied().unwrap_or(0.0) as f64;
            sums.diff += scalar(&g, l_diff);
            sums.ce += scalar(&g, l_ce);
            sums.disc += scalar(&g, l_disc);
            sums.dir += scalar(&g, l_dir);
            sums.total += scalar(&g, total);

            let mut grads = g.backward(total);
            acc_base.add(&b_base, &mut grads);
            acc_unet.add(&b_unet, &mut grads);
            acc_heads.add(&b_heads, &mut grads);
        }

        let k = batch.len() as f64;
        sums.total /= k;
        sums.diff /= k;
        sums.ce /= k;
        sums.disc /= k;
        sums.dir /= k;
        check_finite(step, "diffusion total", sums.total)?;

        if step == 0 {
            assert_branch_decoupling(&models, &observations[batch[0]], &latents[batch[0]])?;
        }

        let lr = train.lr_schedule.lr_at(train.lr, step, train.steps);
        opt_base.step(&mut models.baseline.params, &acc_base.mean(), lr);
        opt_unet.step(&mut models.denoiser.params, &acc_unet.mean(), lr);
        opt_heads.step(&mut models.heads.params, &acc_heads.mean(), lr);
        losses.push(sums);
    }

    Ok(DiffusionTrainOutput { models, losses })
}

/// One-shot integration-level restatement of the denoiser decoupling
/// invariant, run on the first training step: the latent-branch loss must not
/// reach noise-branch decoder parameters and vice versa.
fn assert_branch_decoupling(
    models: &DiffmapModels,
    obs: &Array3<f32>,
    latent: &Array3<f32>,
) -> Result<()> {
    let mut g: Graph<f32> = Graph::new();
    let b_base = models.baseline.params.bind(&mut g, false);
    let b_unet = models.denoiser.params.bind(&mut g, true);
    let obs_node = g.constant(obs.clone().into_dyn());
    let (bev, _) = models.baseline.forward(&mut g, &b_base, obs_node)?;
    let z_node = g.constant(latent.clone().into_dyn());
    let (eps_hat, z_hat) = models.denoiser.forward(&mut g, &b_unet, z_node, 1, bev)?;
    let _ = eps_hat;
    let target = g.constant(latent.clone().into_dyn());
    let l_z = g.mse(z_hat, target);
    let grads = g.backward(l_z);
    for (i, name) in models.denoiser.params.names().iter().enumerate() {
        if name.starts_with("unet.dec_eps.") && grads.get(b_unet.node(ParamId(i))).is_some() {
            return Err(Error::Contract(format!(
                "branch decoupling violated: z loss reached {name}"
            )));
        }
    }
    Ok(())
}
