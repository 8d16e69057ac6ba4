//! The decoupled conditional UNet.
//!
//! The denoiser consumes a noisy latent plus the BEV condition and emits two
//! branch outputs: a noise estimate and a clean-latent estimate. The
//! condition enters twice: resized and projected BEV features are
//! concatenated onto the latent at the input, and every resolution level of
//! the encoder and of both decoders cross-attends against the projected
//! condition tokens. A sinusoidal step embedding modulates every residual
//! block per-channel.
//!
//! The two decoders share no parameters, so the latent-branch loss cannot
//! touch noise-branch decoder weights and vice versa; the gradient tape makes
//! that checkable structurally.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Scalar};
use crate::error::{Error, Result};
use crate::nn::{from_tokens, sinusoidal_embedding, to_tokens, Bound, Conv2d, Linear, ParamSet};

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct DenoiserConfig {
    /// Latent channels D'.
    pub latent_dim: usize,
    /// Condition channels after projection.
    pub cond_channels: usize,
    /// Width of the first UNet level; level l uses `base_width << l`.
    pub base_width: usize,
    /// Number of downsampling levels (0 keeps everything at latent size).
    pub depth: usize,
    /// Attention heads; must divide every level width.
    pub heads: usize,
    /// Sinusoidal time-embedding dimension.
    pub time_dim: usize,
    /// Convolution kernel size (1 gives a translation-free network).
    pub kernel_size: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            latent_dim: 8,
            cond_channels: 16,
            base_width: 32,
            depth: 2,
            heads: 4,
            time_dim: 64,
            kernel_size: 3,
        }
    }
}

impl DenoiserConfig {
    pub fn width(&self, level: usize) -> usize {
        self.base_width << level
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.cond_channels == 0 || self.base_width == 0 {
            return Err(Error::config("denoiser widths must be >= 1"));
        }
        if self.time_dim % 2 != 0 {
            return Err(Error::config("time_dim must be even"));
        }
        if !matches!(self.kernel_size, 1 | 3) {
            return Err(Error::config("kernel_size must be 1 or 3"));
        }
        for l in 0..=self.depth {
            if self.width(l) % self.heads != 0 {
                return Err(Error::config(format!(
                    "heads {} do not divide level width {}",
                    self.heads,
                    self.width(l)
                )));
            }
        }
        Ok(())
    }
}

/// Multi-head scaled-dot-product attention with the condition as key/value.
pub struct CrossAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    dim: usize,
}

impl CrossAttention {
    pub fn init<T: Scalar, R: rand::Rng>(
        ps: &mut ParamSet<T>,
        rng: &mut R,
        name: &str,
        dim: usize,
        ctx_dim: usize,
        heads: usize,
    ) -> Result<Self> {
        if dim % heads != 0 {
            return Err(Error::config(format!("heads {heads} do not divide width {dim}")));
        }
        Ok(CrossAttention {
            wq: Linear::init(ps, rng, &format!("{name}.wq"), dim, dim, false),
            wk: Linear::init(ps, rng, &format!("{name}.wk"), ctx_dim, dim, false),
            wv: Linear::init(ps, rng, &format!("{name}.wv"), ctx_dim, dim, false),
            wo: Linear::init(ps, rng, &format!("{name}.wo"), dim, dim, false),
            heads,
            dim,
        })
    }

    /// Attention output for token matrices, before the residual connection.
    pub fn attend_tokens<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        x_tokens: NodeId,
        ctx_tokens: NodeId,
    ) -> NodeId {
        let q = self.wq.forward(g, bound, x_tokens);
        let k = self.wk.forward(g, bound, ctx_tokens);
        let v = self.wv.forward(g, bound, ctx_tokens);
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut head_outputs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let lo = h * dh;
            let hi = lo + dh;
            let qh = g.slice_cols(q, lo, hi);
            let kh = g.slice_cols(k, lo, hi);
            let vh = g.slice_cols(v, lo, hi);
            let kt = g.transpose2(kh);
            let scores = g.matmul(qh, kt);
            let scores = g.scale(scores, scale);
            let att = g.softmax_rows(scores);
            head_outputs.push(g.matmul(att, vh));
        }
        let cat = g.concat_cols(&head_outputs);
        self.wo.forward(g, bound, cat)
    }

    /// Map-level forward with the residual connection around attention.
    pub fn forward_map<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        x_map: NodeId,
        ctx_tokens: NodeId,
    ) -> NodeId {
        let shape = g.value(x_map).shape().to_vec();
        let (h, w) = (shape[1], shape[2]);
        let x_tok = to_tokens(g, x_map);
        let att = self.attend_tokens(g, bound, x_tok, ctx_tokens);
        let sum = g.add(x_tok, att);
        from_tokens(g, sum, h, w)
    }
}

/// Residual block with per-channel time modulation.
struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    skip: Option<Conv2d>,
    time: Linear,
    out_ch: usize,
}

impl ResBlock {
    fn init<T: Scalar, R: rand::Rng>(
        ps: &mut ParamSet<T>,
        rng: &mut R,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        time_dim: usize,
    ) -> Self {
        let pad = k / 2;
        ResBlock {
            conv1: Conv2d::init(ps, rng, &format!("{name}.conv1"), in_ch, out_ch, k, 1, pad),
            conv2: Conv2d::init(ps, rng, &format!("{name}.conv2"), out_ch, out_ch, k, 1, pad),
            skip: (in_ch != out_ch)
                .then(|| Conv2d::init(ps, rng, &format!("{name}.skip"), in_ch, out_ch, 1, 1, 0)),
            time: Linear::init(ps, rng, &format!("{name}.time"), time_dim, 2 * out_ch, true),
            out_ch,
        }
    }

    fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        x: NodeId,
        temb: NodeId,
    ) -> NodeId {
        let t = self.time.forward(g, bound, temb); // (1, 2C)
        let scale = g.slice_cols(t, 0, self.out_ch);
        let scale = g.reshape(scale, &[self.out_ch]);
        let shift = g.slice_cols(t, self.out_ch, 2 * self.out_ch);
        let shift = g.reshape(shift, &[self.out_ch]);

        let h = self.conv1.forward(g, bound, x);
        let h = g.channel_affine(h, scale, shift);
        let h = g.silu(h);
        let h = self.conv2.forward(g, bound, h);
        let h = g.silu(h);
        let res = match &self.skip {
            Some(conv) => conv.forward(g, bound, x),
            None => x,
        };
        g.add(h, res)
    }
}

/// Learned projection of BEV features into condition space: area-average
/// resize to the latent grid, then a 1x1 channel projection.
pub struct ConditionProjector {
    pub proj: Conv2d,
}

impl ConditionProjector {
    fn init<T: Scalar, R: rand::Rng>(
        ps: &mut ParamSet<T>,
        rng: &mut R,
        name: &str,
        bev_channels: usize,
        cond_channels: usize,
    ) -> Self {
        ConditionProjector {
            proj: Conv2d::init(ps, rng, &format!("{name}.proj"), bev_channels, cond_channels, 1, 1, 0),
        }
    }

    /// Resize `bev` (C x H x W) onto the `h_lat x w_lat` grid and project.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        bev: NodeId,
        h_lat: usize,
        w_lat: usize,
    ) -> Result<NodeId> {
        let resized = resize_area(g, bev, h_lat, w_lat)?;
        Ok(self.proj.forward(g, bound, resized))
    }
}

/// Area-average downsampling of a `C x H x W` map to `h_out x w_out`
/// (integer factor required).
pub fn resize_area<T: Scalar>(
    g: &mut Graph<T>,
    x: NodeId,
    h_out: usize,
    w_out: usize,
) -> Result<NodeId> {
    let shape = g.value(x).shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::contract("resize_area expects a CHW map".to_string()));
    }
    let (h, w) = (shape[1], shape[2]);
    if h == h_out && w == w_out {
        return Ok(x);
    }
    if h % h_out != 0 || w % w_out != 0 || h / h_out != w / w_out {
        return Err(Error::contract(format!(
            "resize {h}x{w} -> {h_out}x{w_out} is not an integer factor"
        )));
    }
    Ok(g.avg_pool(x, h / h_out))
}

/// Two-branch conditional UNet.
pub struct Denoiser<T: Scalar> {
    pub cfg: DenoiserConfig,
    pub params: ParamSet<T>,
    pub cond: ConditionProjector,
    time_trunk: Linear,
    stem: Conv2d,
    enc_res: Vec<ResBlock>,
    enc_attn: Vec<CrossAttention>,
    enc_down: Vec<Conv2d>,
    mid_res1: ResBlock,
    mid_attn: CrossAttention,
    mid_res2: ResBlock,
    dec_eps: BranchDecoder,
    dec_z: BranchDecoder,
}

struct BranchDecoder {
    ups: Vec<Conv2d>,
    res: Vec<ResBlock>,
    attn: Vec<CrossAttention>,
    out: Conv2d,
}

impl BranchDecoder {
    fn init<T: Scalar, R: rand::Rng>(
        ps: &mut ParamSet<T>,
        rng: &mut R,
        name: &str,
        cfg: &DenoiserConfig,
    ) -> Result<Self> {
        let k = cfg.kernel_size;
        let mut ups = Vec::new();
        let mut res = Vec::new();
        let mut attn = Vec::new();
        for l in (0..cfg.depth).rev() {
            ups.push(Conv2d::init(
                ps,
                rng,
                &format!("{name}.up{l}"),
                cfg.width(l + 1),
                cfg.width(l),
                1,
                1,
                0,
            ));
            res.push(ResBlock::init(
                ps,
                rng,
                &format!("{name}.res{l}"),
                2 * cfg.width(l),
                cfg.width(l),
                k,
                cfg.time_dim,
            ));
            attn.push(CrossAttention::init(
                ps,
                rng,
                &format!("{name}.attn{l}"),
                cfg.width(l),
                cfg.cond_channels,
                cfg.heads,
            )?);
        }
        let out = Conv2d::init(ps, rng, &format!("{name}.out"), cfg.width(0), cfg.latent_dim, k, 1, k / 2);
        Ok(BranchDecoder { ups, res, attn, out })
    }

    fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        mut x: NodeId,
        skips: &[NodeId],
        ctx: NodeId,
        temb: NodeId,
    ) -> NodeId {
        for (i, l) in (0..skips.len()).rev().enumerate() {
            x = g.upsample_nearest(x, 2);
            x = self.ups[i].forward(g, bound, x);
            x = g.concat_ch(x, skips[l]);
            x = self.res[i].forward(g, bound, x, temb);
            x = self.attn[i].forward_map(g, bound, x, ctx);
        }
        self.out.forward(g, bound, x)
    }
}

impl<T: Scalar> Denoiser<T> {
    pub fn new(cfg: DenoiserConfig, bev_channels: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = cfg.kernel_size;

        let cond = ConditionProjector::init(&mut params, &mut rng, "unet.cond", bev_channels, cfg.cond_channels);
        let time_trunk = Linear::init(&mut params, &mut rng, "unet.time", cfg.time_dim, cfg.time_dim, true);
        let stem = Conv2d::init(
            &mut params,
            &mut rng,
            "unet.stem",
            cfg.latent_dim + cfg.cond_channels,
            cfg.width(0),
            k,
            1,
            k / 2,
        );

        let mut enc_res = Vec::new();
        let mut enc_attn = Vec::new();
        let mut enc_down = Vec::new();
        for l in 0..cfg.depth {
            enc_res.push(ResBlock::init(
                &mut params,
                &mut rng,
                &format!("unet.enc{l}.res"),
                cfg.width(l),
                cfg.width(l),
                k,
                cfg.time_dim,
            ));
            enc_attn.push(CrossAttention::init(
                &mut params,
                &mut rng,
                &format!("unet.enc{l}.attn"),
                cfg.width(l),
                cfg.cond_channels,
                cfg.heads,
            )?);
            enc_down.push(Conv2d::init(
                &mut params,
                &mut rng,
                &format!("unet.enc{l}.down"),
                cfg.width(l),
                cfg.width(l + 1),
                3,
                2,
                1,
            ));
        }
        let wmid = cfg.width(cfg.depth);
        let mid_res1 = ResBlock::init(&mut params, &mut rng, "unet.mid.res1", wmid, wmid, k, cfg.time_dim);
        let mid_attn = CrossAttention::init(&mut params, &mut rng, "unet.mid.attn", wmid, cfg.cond_channels, cfg.heads)?;
        let mid_res2 = ResBlock::init(&mut params, &mut rng, "unet.mid.res2", wmid, wmid, k, cfg.time_dim);

        let dec_eps = BranchDecoder::init(&mut params, &mut rng, "unet.dec_eps", &cfg)?;
        let dec_z = BranchDecoder::init(&mut params, &mut rng, "unet.dec_z", &cfg)?;

        Ok(Denoiser {
            cfg,
            params,
            cond,
            time_trunk,
            stem,
            enc_res,
            enc_attn,
            enc_down,
            mid_res1,
            mid_attn,
            mid_res2,
            dec_eps,
            dec_z,
        })
    }

    /// Forward pass: noisy latent, step index, BEV condition ->
    /// `(eps_hat, z_hat)`, both shaped like the latent.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        z_t: NodeId,
        t: usize,
        bev: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        if t == 0 {
            return Err(Error::contract("step index t must be >= 1".to_string()));
        }
        let shape = g.value(z_t).shape().to_vec();
        if shape.len() != 3 || shape[0] != self.cfg.latent_dim {
            return Err(Error::contract(format!(
                "latent must be {} x H' x W', got {shape:?}",
                self.cfg.latent_dim
            )));
        }
        let (h_lat, w_lat) = (shape[1], shape[2]);
        let div = 1usize << self.cfg.depth;
        if h_lat % div != 0 || w_lat % div != 0 {
            return Err(Error::contract(format!(
                "latent {h_lat}x{w_lat} not divisible by 2^depth = {div}"
            )));
        }

        let cond_map = self.cond.forward(g, bound, bev, h_lat, w_lat)?;
        let ctx = to_tokens(g, cond_map);

        let temb_raw = sinusoidal_embedding::<T>(t, self.cfg.time_dim);
        let temb_mat = temb_raw.insert_axis(ndarray::Axis(0)).into_dyn();
        let temb0 = g.constant(temb_mat);
        let temb = self.time_trunk.forward(g, bound, temb0);
        let temb = g.silu(temb);

        let mut x = g.concat_ch(z_t, cond_map);
        x = self.stem.forward(g, bound, x);

        let mut skips = Vec::with_capacity(self.cfg.depth);
        for l in 0..self.cfg.depth {
            x = self.enc_res[l].forward(g, bound, x, temb);
            x = self.enc_attn[l].forward_map(g, bound, x, ctx);
            skips.push(x);
            x = self.enc_down[l].forward(g, bound, x);
        }
        x = self.mid_res1.forward(g, bound, x, temb);
        x = self.mid_attn.forward_map(g, bound, x, ctx);
        x = self.mid_res2.forward(g, bound, x, temb);

        let eps_hat = self.dec_eps.forward(g, bound, x, &skips, ctx, temb);
        let z_hat = self.dec_z.forward(g, bound, x, &skips, ctx, temb);
        Ok((eps_hat, z_hat))
    }

    /// Frozen forward on raw values.
    pub fn forward_values(
        &self,
        z_t: &ndarray::Array3<T>,
        t: usize,
        bev: &ndarray::Array3<T>,
    ) -> Result<(ndarray::Array3<T>, ndarray::Array3<T>)> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, false);
        let z = g.constant(z_t.clone().into_dyn());
        let b = g.constant(bev.clone().into_dyn());
        let (e, zh) = self.forward(&mut g, &bound, z, t, b)?;
        Ok((
            g.value(e).clone().into_dimensionality().expect("3-d"),
            g.value(zh).clone().into_dimensionality().expect("3-d"),
        ))
    }

    pub fn cast<U: Scalar>(&self) -> Denoiser<U> {
        // Parameter ids and layer topology are type-independent; rebuilding
        // with the same seed then overwriting values keeps them aligned.
        let mut clone: Denoiser<U> = Denoiser::new(self.cfg, self.bev_channels(), 0).expect("same config");
        clone.params = self.params.cast();
        clone
    }

    fn bev_channels(&self) -> usize {
        // recover from the condition projector weight shape O x C x 1 x 1
        self.params.value(self.cond.proj.w).shape()[1]
    }
}

/// Channel concatenation with the latent first (the condition-injection
/// entry point, exposed for tests and composition).
pub fn condition_concat<T: Scalar>(g: &mut Graph<T>, z_t: NodeId, b_tilde: NodeId) -> Result<NodeId> {
    let zs = g.value(z_t).shape().to_vec();
    let bs = g.value(b_tilde).shape().to_vec();
    if zs.len() != 3 || bs.len() != 3 || zs[1] != bs[1] || zs[2] != bs[2] {
        return Err(Error::contract(format!(
            "condition_concat spatial mismatch: {zs:?} vs {bs:?}"
        )));
    }
    Ok(g.concat_ch(z_t, b_tilde))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamId;
    use ndarray::{Array2, Array3};
    use rand::Rng;

    fn micro_cfg() -> DenoiserConfig {
        DenoiserConfig {
            latent_dim: 2,
            cond_channels: 3,
            base_width: 4,
            depth: 1,
            heads: 2,
            time_dim: 8,
            kernel_size: 3,
        }
    }

    fn randn3(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Array3<f64> {
        Array3::from_shape_simple_fn((c, h, w), || f64::standard_normal(rng))
    }

    #[test]
    fn output_shapes_match_latent() {
        let model: Denoiser<f32> = Denoiser::new(DenoiserConfig::default(), 64, 0).unwrap();
        let z = Array3::<f32>::zeros((8, 16, 8));
        let bev = Array3::<f32>::zeros((64, 128, 64));
        let (eps, zh) = model.forward_values(&z, 500, &bev).unwrap();
        assert_eq!(eps.dim(), (8, 16, 8));
        assert_eq!(zh.dim(), (8, 16, 8));
    }

    #[test]
    fn time_conditioning_is_live() {
        let model: Denoiser<f64> = Denoiser::new(micro_cfg(), 6, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = randn3(&mut rng, 2, 4, 4);
        let bev = randn3(&mut rng, 6, 16, 16);
        let (e1, z1) = model.forward_values(&z, 1, &bev).unwrap();
        let (e2, z2) = model.forward_values(&z, 1000, &bev).unwrap();
        let d_eps = e1.iter().zip(e2.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let d_z = z1.iter().zip(z2.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(d_eps > 0.0, "eps branch ignores t");
        assert!(d_z > 0.0, "z branch ignores t");
    }

    #[test]
    fn condition_is_live() {
        let model: Denoiser<f64> = Denoiser::new(micro_cfg(), 6, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = randn3(&mut rng, 2, 4, 4);
        let bev = randn3(&mut rng, 6, 16, 16);
        let zeros = Array3::<f64>::zeros((6, 16, 16));
        let (e1, _) = model.forward_values(&z, 10, &bev).unwrap();
        let (e2, _) = model.forward_values(&z, 10, &zeros).unwrap();
        let d = e1.iter().zip(e2.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(d > 0.0, "condition ignored");
    }

    #[test]
    fn t_zero_rejected() {
        let model: Denoiser<f32> = Denoiser::new(micro_cfg(), 6, 1).unwrap();
        let z = Array3::<f32>::zeros((2, 4, 4));
        let bev = Array3::<f32>::zeros((6, 16, 16));
        assert!(model.forward_values(&z, 0, &bev).is_err());
    }

    #[test]
    fn condition_concat_keeps_latent_first() {
        let mut g: Graph<f64> = Graph::new();
        let z = g.constant(Array3::from_elem((2, 4, 4), 7.0).into_dyn());
        // sentinel values in the condition channels
        let b = g.constant(Array3::from_elem((3, 4, 4), -5.0).into_dyn());
        let cat = condition_concat(&mut g, z, b).unwrap();
        assert_eq!(g.value(cat).shape(), &[5, 4, 4]);
        let v = g.value(cat);
        // first latent channels recover z bitwise, condition after
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(v[[0, i, j]], 7.0);
                assert_eq!(v[[1, i, j]], 7.0);
                assert_eq!(v[[2, i, j]], -5.0);
                assert_eq!(v[[4, i, j]], -5.0);
            }
        }
        let bad = g.constant(Array3::from_elem((3, 2, 4), 0.0).into_dyn());
        assert!(condition_concat(&mut g, z, bad).is_err());
    }

    #[test]
    fn resize_area_matches_block_means() {
        let mut g: Graph<f64> = Graph::new();
        // checkerboard: block means are exactly 0.5
        let x = Array3::from_shape_fn((1, 4, 4), |(_, i, j)| ((i + j) % 2) as f64);
        let xid = g.constant(x.into_dyn());
        let out = resize_area(&mut g, xid, 2, 2).unwrap();
        for v in g.value(out).iter() {
            assert!((v - 0.5).abs() < 1e-15);
        }
        // constant map stays constant under resizing
        let c = g.constant(Array3::from_elem((2, 8, 8), 3.25).into_dyn());
        let out = resize_area(&mut g, c, 4, 4).unwrap();
        assert!(g.value(out).iter().all(|&v| (v - 3.25).abs() < 1e-15));
    }

    #[test]
    fn single_context_token_attention_is_that_token() {
        // With identity value/output projections and softmax over a single
        // context token, every output position equals the token's value.
        let mut ps: ParamSet<f64> = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let attn = CrossAttention::init(&mut ps, &mut rng, "a", 4, 4, 2).unwrap();
        let eye = Array2::<f64>::eye(4).into_dyn();
        *ps.value_mut(attn.wv.w) = eye.clone();
        *ps.value_mut(attn.wo.w) = eye;

        let mut g = Graph::new();
        let bound = ps.bind(&mut g, false);
        let x = g.constant(
            Array2::from_shape_fn((5, 4), |(i, j)| (i * 4 + j) as f64).into_dyn(),
        );
        let ctx = g.constant(ndarray::arr2(&[[1.0, -2.0, 3.0, 0.5]]).into_dyn());
        let out = attn.attend_tokens(&mut g, &bound, x, ctx);
        let v = g.value(out);
        for row in 0..5 {
            assert!((v[[row, 0]] - 1.0).abs() < 1e-12);
            assert!((v[[row, 1]] + 2.0).abs() < 1e-12);
            assert!((v[[row, 2]] - 3.0).abs() < 1e-12);
            assert!((v[[row, 3]] - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_weights_match_closed_form_two_tokens() {
        // Hand-set Q and K with a single head: weights must equal the
        // softmax of hand-computed scaled dot products.
        let mut ps: ParamSet<f64> = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let attn = CrossAttention::init(&mut ps, &mut rng, "a", 2, 2, 1).unwrap();
        let eye = Array2::<f64>::eye(2).into_dyn();
        *ps.value_mut(attn.wq.w) = eye.clone();
        *ps.value_mut(attn.wk.w) = eye.clone();
        *ps.value_mut(attn.wv.w) = eye.clone();
        *ps.value_mut(attn.wo.w) = eye;

        let q = ndarray::arr2(&[[1.0, 0.0]]);
        let ctx = ndarray::arr2(&[[2.0, 0.0], [0.0, 2.0]]);
        let mut g = Graph::new();
        let bound = ps.bind(&mut g, false);
        let qn = g.constant(q.into_dyn());
        let cn = g.constant(ctx.clone().into_dyn());
        let out_id = attn.attend_tokens(&mut g, &bound, qn, cn);
        let out = g.value(out_id).clone();

        // scores: q . k / sqrt(2) = [2/sqrt(2), 0]
        let s0 = 2.0 / 2f64.sqrt();
        let e0 = s0.exp();
        let w0 = e0 / (e0 + 1.0);
        let w1 = 1.0 / (e0 + 1.0);
        let expect = [w0 * 2.0 + w1 * 0.0, w0 * 0.0 + w1 * 2.0];
        assert!((out[[0, 0]] - expect[0]).abs() < 1e-12);
        assert!((out[[0, 1]] - expect[1]).abs() < 1e-12);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        // softmax rows sum to 1 for random inputs
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut g: Graph<f64> = Graph::new();
        let scores = g.constant(
            Array2::from_shape_simple_fn((7, 9), || f64::standard_normal(&mut rng)).into_dyn(),
        );
        let sm = g.softmax_rows(scores);
        let v = g.value(sm).view().into_dimensionality::<ndarray::Ix2>().unwrap().to_owned();
        for row in v.outer_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn branch_decoupling_gradient_masks() {
        let model: Denoiser<f64> = Denoiser::new(micro_cfg(), 6, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let z = randn3(&mut rng, 2, 4, 4);
        let bev = randn3(&mut rng, 6, 16, 16);
        let z_target = randn3(&mut rng, 2, 4, 4);

        // z-branch loss only
        let mut g = Graph::new();
        let bound = model.params.bind(&mut g, true);
        let zn = g.constant(z.clone().into_dyn());
        let bn = g.constant(bev.clone().into_dyn());
        let (eps_hat, z_hat) = model.forward(&mut g, &bound, zn, 3, bn).unwrap();
        let target = g.constant(z_target.clone().into_dyn());
        let loss = g.mse(z_hat, target);
        let _ = eps_hat;
        let grads = g.backward(loss);
        let mut shared_hit = false;
        for (i, name) in model.params.names().iter().enumerate() {
            let got = grads.get(bound.node(ParamId(i)));
            if name.starts_with("unet.dec_eps.") {
                assert!(got.is_none(), "z loss leaked into {name}");
            }
            if name.starts_with("unet.dec_z.") {
                assert!(got.is_some(), "z loss missed its own branch param {name}");
            }
            if name.starts_with("unet.enc") && got.is_some() {
                shared_hit = true;
            }
        }
        assert!(shared_hit, "z loss must reach the shared encoder");

        // eps-branch loss only (symmetric)
        let mut g = Graph::new();
        let bound = model.params.bind(&mut g, true);
        let zn = g.constant(z.into_dyn());
        let bn = g.constant(bev.into_dyn());
        let (eps_hat, _z_hat) = model.forward(&mut g, &bound, zn, 3, bn).unwrap();
        let target = g.constant(z_target.into_dyn());
        let loss = g.mse(eps_hat, target);
        let grads = g.backward(loss);
        for (i, name) in model.params.names().iter().enumerate() {
            let got = grads.get(bound.node(ParamId(i)));
            if name.starts_with("unet.dec_z.") {
                assert!(got.is_none(), "eps loss leaked into {name}");
            }
            if name.starts_with("unet.dec_eps.") {
                assert!(got.is_some(), "eps loss missed its own branch param {name}");
            }
        }
    }

    #[test]
    fn full_finite_difference_check_micro_config() {
        // every parameter of the 4x4-latent microconfig, 1e-3 relative
        let model: Denoiser<f64> = Denoiser::new(micro_cfg(), 4, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let z = randn3(&mut rng, 2, 4, 4);
        let bev = randn3(&mut rng, 4, 8, 8);
        let z_tgt = randn3(&mut rng, 2, 4, 4);
        let e_tgt = randn3(&mut rng, 2, 4, 4);

        let eval = |params: &ParamSet<f64>| -> f64 {
            let mut g = Graph::new();
            let bound = params.bind(&mut g, false);
            let zn = g.constant(z.clone().into_dyn());
            let bn = g.constant(bev.clone().into_dyn());
            let (eps_hat, z_hat) = model.forward(&mut g, &bound, zn, 5, bn).unwrap();
            let zt = g.constant(z_tgt.clone().into_dyn());
            let et = g.constant(e_tgt.clone().into_dyn());
            let lz = g.mse(z_hat, zt);
            let le = g.mse(eps_hat, et);
            let l = g.add(lz, le);
            g.value(l).iter().next().copied().unwrap()
        };

        let mut g = Graph::new();
        let bound = model.params.bind(&mut g, true);
        let zn = g.constant(z.clone().into_dyn());
        let bn = g.constant(bev.clone().into_dyn());
        let (eps_hat, z_hat) = model.forward(&mut g, &bound, zn, 5, bn).unwrap();
        let zt = g.constant(z_tgt.clone().into_dyn());
        let et = g.constant(e_tgt.clone().into_dyn());
        let lz = g.mse(z_hat, zt);
        let le = g.mse(eps_hat, et);
        let l = g.add(lz, le);
        let grads = g.backward(l);

        let h = 1e-5;
        let mut checked = 0usize;
        for i in 0..model.params.len() {
            let pid = ParamId(i);
            let name = model.params.name(pid).to_string();
            let analytic = grads
                .get(bound.node(pid))
                .unwrap_or_else(|| panic!("no grad for {name}"))
                .clone();
            let n = model.params.value(pid).len();
            let stride = (n / 5).max(1);
            for flat in (0..n).step_by(stride) {
                let mut plus = model.params.cast::<f64>();
                plus.value_mut(pid).as_slice_mut().unwrap()[flat] += h;
                let mut minus = model.params.cast::<f64>();
                minus.value_mut(pid).as_slice_mut().unwrap()[flat] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let an = analytic.as_slice().unwrap()[flat];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
                assert!(rel < 1e-3, "{name} flat {flat}: fd={fd} an={an} rel={rel}");
                checked += 1;
            }
        }
        assert!(checked > 100, "too few probes: {checked}");
    }

    #[test]
    fn permutation_equivariance_translation_free_path() {
        // depth 0 + 1x1 kernels: permuting both inputs spatially and
        // unpermuting the output must be the identity.
        let cfg = DenoiserConfig {
            latent_dim: 2,
            cond_channels: 3,
            base_width: 4,
            depth: 0,
            heads: 2,
            time_dim: 8,
            kernel_size: 1,
        };
        let model: Denoiser<f64> = Denoiser::new(cfg, 3, 13).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let z = randn3(&mut rng, 2, 3, 4);
        let bev = randn3(&mut rng, 3, 3, 4); // already latent-sized

        // a fixed spatial permutation of the 12 positions
        let n = 12usize;
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            perm.swap(i, j);
        }
        let permute = |m: &Array3<f64>| -> Array3<f64> {
            let (c, h, w) = m.dim();
            let mut out = Array3::zeros((c, h, w));
            for ci in 0..c {
                for p in 0..n {
                    let (i, j) = (p / w, p % w);
                    let q = perm[p];
                    let (pi, pj) = (q / w, q % w);
                    out[(ci, i, j)] = m[(ci, pi, pj)];
                }
            }
            out
        };
        let unpermute = |m: &Array3<f64>| -> Array3<f64> {
            let (c, h, w) = m.dim();
            let mut out = Array3::zeros((c, h, w));
            for ci in 0..c {
                for p in 0..n {
                    let (i, j) = (p / w, p % w);
                    let q = perm[p];
                    let (pi, pj) = (q / w, q % w);
                    out[(ci, pi, pj)] = m[(ci, i, j)];
                }
            }
            out
        };

        let (e_ref, z_ref) = model.forward_values(&z, 9, &bev).unwrap();
        let (e_perm, z_perm) = model.forward_values(&permute(&z), 9, &permute(&bev)).unwrap();
        let e_back = unpermute(&e_perm);
        let z_back = unpermute(&z_perm);
        for (a, b) in e_back.iter().zip(e_ref.iter()) {
            assert!((a - b).abs() < 1e-10, "eps branch not equivariant");
        }
        for (a, b) in z_back.iter().zip(z_ref.iter()) {
            assert!((a - b).abs() < 1e-10, "z branch not equivariant");
        }
    }
}
