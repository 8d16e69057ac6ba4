//! Baseline BEV encoder.
//!
//! Plays two roles: it converts the corrupted observation into BEV features
//! (the condition guiding the denoiser) and produces a full-resolution
//! feature map for the instance heads, giving the auxiliary losses something
//! to supervise on the baseline side.
//!
//! The network is a small strided-convolution stack with a nearest-neighbor
//! upsampling path back to full resolution plus a full-resolution skip branch
//! so the feature map keeps pixel-level detail.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Scalar};
use crate::error::{Error, Result};
use crate::nn::{Bound, Conv2d, ParamSet};

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct BaselineConfig {
    /// Channels of the BEV feature grid (the condition).
    pub bev_channels: usize,
    /// Channels of the head feature map.
    pub feat_width: usize,
    /// Width of the first encoder stage.
    pub base_width: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            bev_channels: 64,
            feat_width: 16,
            base_width: 16,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bev_channels == 0 || self.feat_width == 0 || self.base_width == 0 {
            return Err(Error::config("baseline widths must be >= 1"));
        }
        Ok(())
    }
}

pub struct Baseline<T: Scalar> {
    pub cfg: BaselineConfig,
    pub params: ParamSet<T>,
    down1: Conv2d,
    down2: Conv2d,
    mid: Conv2d,
    bev_proj: Conv2d,
    skip: Conv2d,
    feat_proj: Conv2d,
    in_channels: usize,
}

impl<T: Scalar> Baseline<T> {
    pub fn new(cfg: BaselineConfig, in_channels: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bw = cfg.base_width;
        let down1 = Conv2d::init(&mut params, &mut rng, "base.down1", in_channels, bw, 3, 2, 1);
        let down2 = Conv2d::init(&mut params, &mut rng, "base.down2", bw, 2 * bw, 3, 2, 1);
        let mid = Conv2d::init(&mut params, &mut rng, "base.mid", 2 * bw, 2 * bw, 3, 1, 1);
        let bev_proj = Conv2d::init(&mut params, &mut rng, "base.bev", 2 * bw, cfg.bev_channels, 1, 1, 0);
        let skip = Conv2d::init(&mut params, &mut rng, "base.skip", in_channels, bw / 2 + 1, 3, 1, 1);
        let feat_proj = Conv2d::init(
            &mut params,
            &mut rng,
            "base.feat",
            2 * bw + bw / 2 + 1,
            cfg.feat_width,
            1,
            1,
            0,
        );
        Ok(Baseline {
            cfg,
            params,
            down1,
            down2,
            mid,
            bev_proj,
            skip,
            feat_proj,
            in_channels,
        })
    }

    /// Forward pass: observation raster -> (BEV features, head feature map),
    /// both at full grid resolution.
    pub fn forward(&self, g: &mut Graph<T>, bound: &Bound, obs: NodeId) -> Result<(NodeId, NodeId)> {
        let shape = g.value(obs).shape().to_vec();
        if shape.len() != 3 || shape[0] != self.in_channels {
            return Err(Error::contract(format!(
                "baseline expects {} x H x W observation, got {shape:?}",
                self.in_channels
            )));
        }
        if shape[1] % 4 != 0 || shape[2] % 4 != 0 {
            return Err(Error::contract(format!(
                "baseline needs H and W divisible by 4, got {}x{}",
                shape[1], shape[2]
            )));
        }
        if g.value(obs).iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("observation contains non-finite values".to_string()));
        }
        let e1 = self.down1.forward(g, bound, obs);
        let e1 = g.silu(e1);
        let e2 = self.down2.forward(g, bound, e1);
        let e2 = g.silu(e2);
        let e3 = self.mid.forward(g, bound, e2);
        let e3 = g.silu(e3);

        // Condition: 1x1 projection then upsample (cheaper than projecting at
        // full resolution, identical result for nearest-neighbor upsampling).
        let bev_small = self.bev_proj.forward(g, bound, e3);
        let bev = g.upsample_nearest(bev_small, 4);

        // Head features: upsampled trunk + full-resolution skip.
        let up = g.upsample_nearest(e3, 4);
        let sk = self.skip.forward(g, bound, obs);
        let sk = g.silu(sk);
        let cat = g.concat_ch(up, sk);
        let feat = self.feat_proj.forward(g, bound, cat);
        let feat = g.silu(feat);
        Ok((bev, feat))
    }

    /// Frozen forward outside a training graph.
    pub fn forward_values(
        &self,
        obs: &ndarray::Array3<T>,
    ) -> Result<(ndarray::Array3<T>, ndarray::Array3<T>)> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, false);
        let o = g.constant(obs.clone().into_dyn());
        let (bev, feat) = self.forward(&mut g, &bound, o)?;
        Ok((
            g.value(bev).clone().into_dimensionality().expect("3-d"),
            g.value(feat).clone().into_dimensionality().expect("3-d"),
        ))
    }

    pub fn cast<U: Scalar>(&self) -> Baseline<U> {
        Baseline {
            cfg: self.cfg,
            params: self.params.cast(),
            down1: self.down1,
            down2: self.down2,
            mid: self.mid,
            bev_proj: self.bev_proj,
            skip: self.skip,
            feat_proj: self.feat_proj,
            in_channels: self.in_channels,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamId;
    use ndarray::Array3;
    use rand::Rng;

    #[test]
    fn output_shape_contract() {
        let model: Baseline<f32> = Baseline::new(BaselineConfig::default(), 3, 0).unwrap();
        let obs = Array3::<f32>::zeros((3, 128, 64));
        let (bev, feat) = model.forward_values(&obs).unwrap();
        assert_eq!(bev.dim(), (64, 128, 64));
        assert_eq!(feat.dim(), (16, 128, 64));
    }

    #[test]
    fn forward_is_deterministic() {
        let model: Baseline<f32> = Baseline::new(BaselineConfig::default(), 3, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let obs = Array3::<f32>::from_shape_simple_fn((3, 64, 64), || rng.gen_range(0.0f32..1.0));
        let a = model.forward_values(&obs).unwrap();
        let b = model.forward_values(&obs).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn shape_mismatch_is_contract_error() {
        let model: Baseline<f32> = Baseline::new(BaselineConfig::default(), 3, 1).unwrap();
        assert!(model.forward_values(&Array3::<f32>::zeros((2, 64, 64))).is_err());
        assert!(model.forward_values(&Array3::<f32>::zeros((3, 30, 64))).is_err());
    }

    #[test]
    fn all_parameter_gradients_match_finite_differences() {
        // 16x16 crop, micro widths, f64: every parameter's analytic gradient
        // within 1e-3 relative of central differences.
        let cfg = BaselineConfig {
            bev_channels: 6,
            feat_width: 4,
            base_width: 4,
        };
        let model: Baseline<f64> = Baseline::new(cfg, 3, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let obs = Array3::<f64>::from_shape_simple_fn((3, 16, 16), || rng.gen_range(0.0..1.0));
        // random scalar functional of both outputs
        let wa = Array3::<f64>::from_shape_simple_fn((6, 16, 16), || rng.gen_range(-1.0..1.0));
        let wb = Array3::<f64>::from_shape_simple_fn((4, 16, 16), || rng.gen_range(-1.0..1.0));

        let eval = |params: &ParamSet<f64>| -> f64 {
            let mut g = Graph::new();
            let bound = params.bind(&mut g, false);
            let o = g.constant(obs.clone().into_dyn());
            let (bev, feat) = model.forward(&mut g, &bound, o).unwrap();
            let wa_n = g.constant(wa.clone().into_dyn());
            let wb_n = g.constant(wb.clone().into_dyn());
            let pa = g.mul(bev, wa_n);
            let pb = g.mul(feat, wb_n);
            let sa = g.sum_all(pa);
            let sa = g.silu(sa);
            let sb = g.sum_all(pb);
            let s = g.add(sa, sb);
            g.value(s).iter().next().copied().unwrap()
        };

        // analytic gradients
        let mut g = Graph::new();
        let bound = model.params.bind(&mut g, true);
        let o = g.constant(obs.clone().into_dyn());
        let (bev, feat) = model.forward(&mut g, &bound, o).unwrap();
        let wa_n = g.constant(wa.clone().into_dyn());
        let wb_n = g.constant(wb.clone().into_dyn());
        let pa = g.mul(bev, wa_n);
        let pb = g.mul(feat, wb_n);
        let sa = g.sum_all(pa);
        let sa = g.silu(sa);
        let sb = g.sum_all(pb);
        let s = g.add(sa, sb);
        let grads = g.backward(s);

        let h = 1e-5;
        let mut checked = 0usize;
        for i in 0..model.params.len() {
            let pid = ParamId(i);
            let analytic = grads.get(bound.node(pid)).expect("all params touched").clone();
            let n = model.params.value(pid).len();
            // probe a deterministic subset of components per tensor
            let stride = (n / 7).max(1);
            for flat in (0..n).step_by(stride) {
                let mut plus = model.params.cast::<f64>();
                plus.value_mut(pid).as_slice_mut().unwrap()[flat] += h;
                let mut minus = model.params.cast::<f64>();
                minus.value_mut(pid).as_slice_mut().unwrap()[flat] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let an = analytic.as_slice().unwrap()[flat];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
                assert!(
                    rel < 1e-3,
                    "param {} flat {flat}: fd={fd} analytic={an} rel={rel}",
                    model.params.name(pid)
                );
                checked += 1;
            }
        }
        assert!(checked > 50, "too few probes: {checked}");
    }
}
