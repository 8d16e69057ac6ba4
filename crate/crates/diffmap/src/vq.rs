//! VQ-VAE perceptual compression: a strided-convolution encoder to a latent
//! grid, nearest-neighbor quantization against a learned codebook with a
//! straight-through gradient, a sub-pixel-convolution decoder back to map
//! space, and the three-term training loss (reconstruction + codebook +
//! commitment).
//!
//! The decoder exposes its penultimate feature map (`feat_width` channels at
//! full resolution) as the semantic feature map the instance heads consume;
//! a final 1x1 projection turns it into per-class mask logits.

use ndarray::{Array2, Array3, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Arr, Graph, NodeId, Scalar};
use crate::error::{Error, Result};
use crate::nn::{from_tokens, to_tokens, Bound, Conv2d, ParamId, ParamSet};

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct VqConfig {
    /// Spatial downsampling factor, one of 4, 8, 16.
    pub factor: usize,
    /// Latent channels D'.
    pub latent_dim: usize,
    /// Codebook size K.
    pub codebook_size: usize,
    /// Commitment loss weight.
    pub beta: f64,
    /// Positive-pixel weight of the reconstruction BCE (1 = plain BCE).
    pub pos_weight: f64,
    /// Penultimate decoder width; this is the semantic feature map the
    /// instance heads read.
    pub feat_width: usize,
}

impl Default for VqConfig {
    fn default() -> Self {
        VqConfig {
            factor: 8,
            latent_dim: 8,
            codebook_size: 512,
            beta: 0.25,
            pos_weight: 8.0,
            feat_width: 16,
        }
    }
}

impl VqConfig {
    pub fn validate(&self) -> Result<()> {
        if !matches!(self.factor, 4 | 8 | 16) {
            return Err(Error::config(format!("factor {} not in {{4, 8, 16}}", self.factor)));
        }
        if self.latent_dim == 0 || self.codebook_size == 0 || self.feat_width == 0 {
            return Err(Error::config("latent_dim, codebook_size, feat_width must be >= 1"));
        }
        Ok(())
    }

    pub fn n_down(&self) -> usize {
        self.factor.trailing_zeros() as usize
    }

    /// Channel width at downsampling level `lvl` (0 = full resolution).
    fn width(&self, lvl: usize) -> usize {
        match lvl {
            0 | 1 => self.feat_width,
            l => self.feat_width << (l - 1),
        }
    }
}

/// Encoder, codebook, and decoder parameters.
pub struct VqVae<T: Scalar> {
    pub cfg: VqConfig,
    pub params: ParamSet<T>,
    enc: Vec<Conv2d>,
    enc_mid: Conv2d,
    enc_out: Conv2d,
    pub codebook: ParamId,
    dec_in: Conv2d,
    dec_mid: Conv2d,
    dec_ups: Vec<Conv2d>,
    dec_refine: Vec<Option<Conv2d>>,
    dec_feat: Conv2d,
    dec_logits: Conv2d,
    in_channels: usize,
}

impl<T: Scalar> VqVae<T> {
    pub fn new(cfg: VqConfig, in_channels: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = cfg.n_down();

        let mut enc = Vec::new();
        for lvl in 0..n {
            let cin = if lvl == 0 { in_channels } else { cfg.width(lvl) };
            let cout = cfg.width(lvl + 1);
            enc.push(Conv2d::init(&mut params, &mut rng, &format!("enc.down{lvl}"), cin, cout, 3, 2, 1));
        }
        let wb = cfg.width(n);
        let enc_mid = Conv2d::init(&mut params, &mut rng, "enc.mid", wb, wb, 3, 1, 1);
        let enc_out = Conv2d::init(&mut params, &mut rng, "enc.out", wb, cfg.latent_dim, 1, 1, 0);

        let bound_init = (1.0 / cfg.codebook_size as f64).max(0.05);
        let codebook = params.add(
            "codebook",
            ndarray::ArrayD::from_shape_simple_fn(
                ndarray::IxDyn(&[cfg.codebook_size, cfg.latent_dim]),
                || T::uniform(&mut rng, -bound_init, bound_init),
            ),
        );

        let dec_in = Conv2d::init(&mut params, &mut rng, "dec.in", cfg.latent_dim, wb, 3, 1, 1);
        let dec_mid = Conv2d::init(&mut params, &mut rng, "dec.mid", wb, wb, 3, 1, 1);
        let mut dec_ups = Vec::new();
        let mut dec_refine = Vec::new();
        for lvl in (1..=n).rev() {
            let cin = cfg.width(lvl);
            let cout = cfg.width(lvl - 1);
            dec_ups.push(Conv2d::init(&mut params, &mut rng, &format!("dec.up{lvl}"), cin, 4 * cout, 1, 1, 0));
            // refine with a 3x3 except at full resolution
            dec_refine.push(if lvl - 1 > 0 {
                Some(Conv2d::init(&mut params, &mut rng, &format!("dec.refine{lvl}"), cout, cout, 3, 1, 1))
            } else {
                None
            });
        }
        let dec_feat = Conv2d::init(&mut params, &mut rng, "dec.feat", cfg.width(0), cfg.feat_width, 1, 1, 0);
        let dec_logits = Conv2d::init(&mut params, &mut rng, "dec.logits", cfg.feat_width, in_channels, 1, 1, 0);

        Ok(VqVae {
            cfg,
            params,
            enc,
            enc_mid,
            enc_out,
            codebook,
            dec_in,
            dec_mid,
            dec_ups,
            dec_refine,
            dec_feat,
            dec_logits,
            in_channels,
        })
    }

    /// Encode a `C x H x W` map into the continuous latent grid
    /// `D' x H/f x W/f`. H and W must be divisible by the factor.
    pub fn encode(&self, g: &mut Graph<T>, bound: &Bound, x: NodeId) -> Result<NodeId> {
        let shape = g.value(x).shape().to_vec();
        if shape.len() != 3 || shape[0] != self.in_channels {
            return Err(Error::contract(format!(
                "encode expects {} x H x W input, got {shape:?}",
                self.in_channels
            )));
        }
        if shape[1] % self.cfg.factor != 0 || shape[2] % self.cfg.factor != 0 {
            return Err(Error::contract(format!(
                "input {}x{} not divisible by factor {} (pad first)",
                shape[1], shape[2], self.cfg.factor
            )));
        }
        let mut h = x;
        for conv in &self.enc {
            h = conv.forward(g, bound, h);
            h = g.silu(h);
        }
        h = self.enc_mid.forward(g, bound, h);
        h = g.silu(h);
        Ok(self.enc_out.forward(g, bound, h))
    }

    /// Decode a latent grid back to full resolution. Returns the semantic
    /// feature map (`feat_width x H x W`) and per-class mask logits.
    pub fn decode(&self, g: &mut Graph<T>, bound: &Bound, z: NodeId) -> Result<(NodeId, NodeId)> {
        let shape = g.value(z).shape().to_vec();
        if shape.len() != 3 || shape[0] != self.cfg.latent_dim {
            return Err(Error::contract(format!(
                "decode expects {} x H' x W' latent, got {shape:?}",
                self.cfg.latent_dim
            )));
        }
        let mut h = self.dec_in.forward(g, bound, z);
        h = g.silu(h);
        h = self.dec_mid.forward(g, bound, h);
        h = g.silu(h);
        for (up, refine) in self.dec_ups.iter().zip(&self.dec_refine) {
            h = up.forward(g, bound, h);
            h = g.pixel_shuffle(h, 2);
            h = g.silu(h);
            if let Some(conv) = refine {
                h = conv.forward(g, bound, h);
                h = g.silu(h);
            }
        }
        let feat_pre = self.dec_feat.forward(g, bound, h);
        let feat = g.silu(feat_pre);
        let logits = self.dec_logits.forward(g, bound, feat);
        Ok((feat, logits))
    }

    /// Encode a raw raster outside any training graph (frozen forward).
    pub fn encode_values(&self, x: &Array3<T>) -> Result<Array3<T>> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, false);
        let xid = g.constant(x.clone().into_dyn());
        let z = self.encode(&mut g, &bound, xid)?;
        Ok(g.value(z).clone().into_dimensionality().expect("latent is 3-d"))
    }

    /// Decode latent values outside any training graph.
    pub fn decode_values(&self, z: &Array3<T>) -> Result<(Array3<T>, Array3<T>)> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, false);
        let zid = g.constant(z.clone().into_dyn());
        let (feat, logits) = self.decode(&mut g, &bound, zid)?;
        Ok((
            g.value(feat).clone().into_dimensionality().expect("3-d"),
            g.value(logits).clone().into_dimensionality().expect("3-d"),
        ))
    }

    /// Quantize encoder-output values and return `(z_q grid, indices)`.
    pub fn quantize_grid(&self, z_e: &Array3<T>) -> Result<(Array3<T>, Vec<usize>)> {
        let (d, h, w) = z_e.dim();
        if d != self.cfg.latent_dim {
            return Err(Error::contract("latent dim mismatch".to_string()));
        }
        let tokens = grid_to_tokens(z_e);
        let codebook = self
            .params
            .value(self.codebook)
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("codebook is 2-d");
        let (indices, zq_tokens) = quantize(&tokens.view(), &codebook)?;
        Ok((tokens_to_grid(&zq_tokens, h, w), indices))
    }

    /// Full frozen encode -> quantize path (what diffusion training uses).
    pub fn encode_quantized(&self, x: &Array3<T>) -> Result<Array3<T>> {
        let z_e = self.encode_values(x)?;
        Ok(self.quantize_grid(&z_e)?.0)
    }

    /// Cast all parameters to another element type.
    pub fn cast<U: Scalar>(&self) -> VqVae<U> {
        VqVae {
            cfg: self.cfg,
            params: self.params.cast(),
            enc: self.enc.clone(),
            enc_mid: self.enc_mid,
            enc_out: self.enc_out,
            codebook: self.codebook,
            dec_in: self.dec_in,
            dec_mid: self.dec_mid,
            dec_ups: self.dec_ups.clone(),
            dec_refine: self.dec_refine.clone(),
            dec_feat: self.dec_feat,
            dec_logits: self.dec_logits,
            in_channels: self.in_channels,
        }
    }
}

/// Flatten a `D x H x W` latent grid into `(H*W, D)` tokens (row-major).
pub fn grid_to_tokens<T: Scalar>(z: &Array3<T>) -> Array2<T> {
    let (d, h, w) = z.dim();
    let mut out = Array2::zeros((h * w, d));
    for di in 0..d {
        for i in 0..h {
            for j in 0..w {
                out[(i * w + j, di)] = z[(di, i, j)];
            }
        }
    }
    out
}

/// Inverse of [`grid_to_tokens`].
pub fn tokens_to_grid<T: Scalar>(tokens: &Array2<T>, h: usize, w: usize) -> Array3<T> {
    let (n, d) = tokens.dim();
    assert_eq!(n, h * w, "token count mismatch");
    let mut out = Array3::zeros((d, h, w));
    for di in 0..d {
        for i in 0..h {
            for j in 0..w {
                out[(di, i, j)] = tokens[(i * w + j, di)];
            }
        }
    }
    out
}

/// Nearest-neighbor quantization: per token the codebook row minimizing the
/// squared Euclidean distance, ties broken toward the lowest index.
pub fn quantize<T: Scalar>(
    z_e: &ArrayView2<T>,
    codebook: &ArrayView2<T>,
) -> Result<(Vec<usize>, Array2<T>)> {
    let (n, d) = z_e.dim();
    let (k, dc) = codebook.dim();
    if k == 0 {
        return Err(Error::config("empty codebook".to_string()));
    }
    if d != dc {
        return Err(Error::contract(format!(
            "latent dim {d} does not match codebook dim {dc}"
        )));
    }
    let mut indices = Vec::with_capacity(n);
    let mut zq = Array2::zeros((n, d));
    for (ti, token) in z_e.outer_iter().enumerate() {
        let mut best = 0usize;
        let mut best_d = T::infinity();
        for (ki, row) in codebook.outer_iter().enumerate() {
            let mut dist = T::zero();
            for (&a, &b) in token.iter().zip(row.iter()) {
                let diff = a - b;
                dist = dist + diff * diff;
            }
            if dist < best_d {
                best_d = dist;
                best = ki;
            }
        }
        indices.push(best);
        zq.row_mut(ti).assign(&codebook.row(best));
    }
    Ok((indices, zq))
}

/// Loss components with gradient routing already applied in-graph.
pub struct VqTrainNodes {
    pub z_e: NodeId,
    pub z_q_st: NodeId,
    pub features: NodeId,
    pub logits: NodeId,
    pub indices: Vec<usize>,
    pub recon: NodeId,
    pub vq: NodeId,
    pub commit: NodeId,
    pub total: NodeId,
}

/// Build the full VQ-VAE training graph for one sample: encode, quantize with
/// straight-through, decode, and the three-term loss
/// `total = recon + vq + beta * commit` where `recon` is mean binary
/// cross-entropy of the mask logits, `vq = ||sg[z_e] - e||^2` (moves codes)
/// and `commit = ||z_e - sg[e]||^2` (moves the encoder).
pub fn vq_training_graph<T: Scalar>(
    model: &VqVae<T>,
    g: &mut Graph<T>,
    bound: &Bound,
    x: &Array3<T>,
) -> Result<VqTrainNodes> {
    let x_node = g.constant(x.clone().into_dyn());
    let z_e = model.encode(g, bound, x_node)?;
    let shape = g.value(z_e).shape().to_vec();
    let (hh, ww) = (shape[1], shape[2]);

    let z_e_tok = to_tokens(g, z_e);
    let codebook = bound.node(model.codebook);
    let cb_view = g
        .value(codebook)
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("codebook 2-d");
    let ze_view = g
        .value(z_e_tok)
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("tokens 2-d");
    let (indices, zq_tokens) = quantize(&ze_view.view(), &cb_view.view())?;

    let st_tok = g.straight_through(z_e_tok, zq_tokens.clone().into_dyn());
    let z_q_st = from_tokens(g, st_tok, hh, ww);
    let (features, logits) = model.decode(g, bound, z_q_st)?;

    let target: Arr<T> = x.clone().into_dyn();
    let recon = g.bce_with_logits_weighted(logits, &target, model.cfg.pos_weight);

    let ze_detached = g.detach(z_e_tok);
    let rows = g.gather_rows(codebook, indices.clone());
    let vq = g.mse(ze_detached, rows);

    let zq_const = g.constant(zq_tokens.into_dyn());
    let commit = g.mse(z_e_tok, zq_const);

    let commit_scaled = g.scale(commit, model.cfg.beta);
    let partial = g.add(recon, vq);
    let total = g.add(partial, commit_scaled);

    Ok(VqTrainNodes {
        z_e,
        z_q_st,
        features,
        logits,
        indices,
        recon,
        vq,
        commit,
        total,
    })
}

/// Value-level three-term loss used by tests and logging:
/// `(total, recon, vq, commit)`. The vq and commitment terms share the same
/// value (they differ only in gradient routing).
pub fn vqvae_loss<T: Scalar>(
    x: &Array3<T>,
    x_hat_logits: &Array3<T>,
    z_e: &Array3<T>,
    z_q: &Array3<T>,
    beta: f64,
) -> Result<(T, T, T, T)> {
    if x.dim() != x_hat_logits.dim() {
        return Err(Error::contract("loss: x and x_hat shapes differ".to_string()));
    }
    if z_e.dim() != z_q.dim() {
        return Err(Error::contract("loss: z_e and z_q shapes differ".to_string()));
    }
    let n = T::from_f64(x.len() as f64);
    let mut recon = T::zero();
    let zero = T::zero();
    for (&logit, &t) in x_hat_logits.iter().zip(x.iter()) {
        recon = recon + logit.max(zero) - logit * t + (T::one() + (-logit.abs()).exp()).ln();
    }
    recon = recon / n;

    let m = T::from_f64(z_e.len() as f64);
    let mut q = T::zero();
    for (&a, &b) in z_e.iter().zip(z_q.iter()) {
        let d = a - b;
        q = q + d * d;
    }
    q = q / m;

    let total = recon + q + T::from_f64(beta) * q;
    Ok((total, recon, q, q))
}
