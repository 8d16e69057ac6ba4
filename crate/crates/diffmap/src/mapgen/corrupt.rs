//! Corruption model for clean masks, emulating segmentation artifacts:
//! missing patches, thinned or thickened strokes, boundary jitter, blur, and
//! stray label flips. Stages run in a fixed order, each on its own RNG
//! stream, so output is a pure function of `(gt, config, seed)`.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::CorruptionConfig;

fn stage_rng(seed: u64, stage: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stage);
    rng
}

/// Corrupt a binary `C x H x W` ground-truth stack into an observation raster
/// in `[0, 1]`. Order: patch dropout, erosion/dilation, pixel jitter,
/// Gaussian blur, label flipping.
pub fn corrupt(gt_semantic: &Array3<u8>, cfg: &CorruptionConfig, seed: u64) -> Array3<f32> {
    let (c, h, w) = gt_semantic.dim();
    let mut obs = gt_semantic.mapv(|v| v as f32);

    // 1. patch dropout: zero square patches across all classes.
    if cfg.dropout_patch_rate > 0.0 && cfg.patch_size_px > 0 {
        let mut rng = stage_rng(seed, 1);
        let patch = cfg.patch_size_px;
        let area = (h * w) as f64;
        let n_patches = (cfg.dropout_patch_rate * area / (patch * patch) as f64).ceil() as usize;
        for _ in 0..n_patches {
            let i0 = rng.gen_range(0..h.saturating_sub(patch).max(1));
            let j0 = rng.gen_range(0..w.saturating_sub(patch).max(1));
            let i1 = (i0 + patch).min(h);
            let j1 = (j0 + patch).min(w);
            obs.slice_mut(ndarray::s![.., i0..i1, j0..j1]).fill(0.0);
        }
    }

    // 2. morphology: erosion then dilation with a square window.
    if cfg.erosion_dilation_px > 0 {
        let r = cfg.erosion_dilation_px;
        for ci in 0..c {
            let plane = obs.index_axis(ndarray::Axis(0), ci).to_owned();
            let eroded = morph(&plane, r, true);
            let dilated = morph(&eroded, r, false);
            obs.index_axis_mut(ndarray::Axis(0), ci).assign(&dilated);
        }
    }

    // 3. pixel jitter: displace foreground mass by rounded Gaussian offsets.
    if cfg.jitter_px > 0.0 {
        let mut rng = stage_rng(seed, 3);
        let normal = Normal::new(0.0f64, cfg.jitter_px).expect("positive sigma");
        for ci in 0..c {
            let plane = obs.index_axis(ndarray::Axis(0), ci).to_owned();
            let mut out = Array2::<f32>::zeros((h, w));
            for i in 0..h {
                for j in 0..w {
                    let v = plane[(i, j)];
                    if v <= 0.0 {
                        continue;
                    }
                    let di = normal.sample(&mut rng).round() as isize;
                    let dj = normal.sample(&mut rng).round() as isize;
                    let ti = i as isize + di;
                    let tj = j as isize + dj;
                    if ti >= 0 && (ti as usize) < h && tj >= 0 && (tj as usize) < w {
                        let slot = &mut out[(ti as usize, tj as usize)];
                        *slot = slot.max(v);
                    }
                }
            }
            obs.index_axis_mut(ndarray::Axis(0), ci).assign(&out);
        }
    }

    // 4. Gaussian blur, separable, zero padding at the borders.
    if cfg.blur_sigma_px > 0.0 {
        let kernel = gaussian_kernel(cfg.blur_sigma_px);
        for ci in 0..c {
            let plane = obs.index_axis(ndarray::Axis(0), ci).to_owned();
            let blurred = blur_separable(&plane, &kernel);
            obs.index_axis_mut(ndarray::Axis(0), ci).assign(&blurred);
        }
    }

    // 5. label flips: v -> 1 - v with fixed per-pixel probability.
    if cfg.flip_label_rate > 0.0 {
        let mut rng = stage_rng(seed, 5);
        for v in obs.iter_mut() {
            if rng.gen_bool(cfg.flip_label_rate) {
                *v = 1.0 - *v;
            }
        }
    }

    obs.mapv_inplace(|v| v.clamp(0.0, 1.0));
    obs
}

/// Min (erode) or max (dilate) filter with a `(2r+1)`-square window.
fn morph(plane: &Array2<f32>, r: usize, erode: bool) -> Array2<f32> {
    let (h, w) = plane.dim();
    let mut out = Array2::<f32>::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let mut acc = if erode { f32::INFINITY } else { f32::NEG_INFINITY };
            for di in -(r as isize)..=(r as isize) {
                for dj in -(r as isize)..=(r as isize) {
                    let ti = i as isize + di;
                    let tj = j as isize + dj;
                    // outside the grid counts as background
                    let v = if ti >= 0 && (ti as usize) < h && tj >= 0 && (tj as usize) < w {
                        plane[(ti as usize, tj as usize)]
                    } else {
                        0.0
                    };
                    acc = if erode { acc.min(v) } else { acc.max(v) };
                }
            }
            out[(i, j)] = acc;
        }
    }
    out
}

fn gaussian_kernel(sigma: f64) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i as f64).powi(2) / (2.0 * sigma * sigma)).exp() as f32)
        .collect();
    let sum: f32 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

fn blur_separable(plane: &Array2<f32>, kernel: &[f32]) -> Array2<f32> {
    let (h, w) = plane.dim();
    let radius = (kernel.len() / 2) as isize;
    let mut tmp = Array2::<f32>::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let mut s = 0.0;
            for (ki, &kv) in kernel.iter().enumerate() {
                let tj = j as isize + ki as isize - radius;
                if tj >= 0 && (tj as usize) < w {
                    s += kv * plane[(i, tj as usize)];
                }
            }
            tmp[(i, j)] = s;
        }
    }
    let mut out = Array2::<f32>::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let mut s = 0.0;
            for (ki, &kv) in kernel.iter().enumerate() {
                let ti = i as isize + ki as isize - radius;
                if ti >= 0 && (ti as usize) < h {
                    s += kv * tmp[(ti as usize, j)];
                }
            }
            out[(i, j)] = s;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mapgen::{generate_scene, SceneConfig};

    #[test]
    fn zero_config_is_identity() {
        let cfg = SceneConfig::short_range();
        let sample = generate_scene(11, &cfg).unwrap();
        let obs = corrupt(&sample.gt.semantic, &CorruptionConfig::none(), 11);
        let expect = sample.gt.semantic.mapv(|v| v as f32);
        assert_eq!(obs, expect);
    }

    #[test]
    fn corruption_is_deterministic() {
        let cfg = SceneConfig::short_range();
        let sample = generate_scene(11, &cfg).unwrap();
        let a = corrupt(&sample.gt.semantic, &CorruptionConfig::default(), 4);
        let b = corrupt(&sample.gt.semantic, &CorruptionConfig::default(), 4);
        assert_eq!(a, b);
        let c = corrupt(&sample.gt.semantic, &CorruptionConfig::default(), 5);
        assert_ne!(a, c);
    }

    #[test]
    fn covering_patch_zeroes_everything() {
        let cfg = SceneConfig::short_range();
        let sample = generate_scene(11, &cfg).unwrap();
        let mut corruption = CorruptionConfig::none();
        corruption.dropout_patch_rate = 1.0;
        corruption.patch_size_px = 128; // covers the whole 128 x 64 grid
        let obs = corrupt(&sample.gt.semantic, &corruption, 0);
        assert_eq!(obs.sum(), 0.0);
    }

    #[test]
    fn output_stays_in_unit_interval() {
        let cfg = SceneConfig::short_range();
        let sample = generate_scene(3, &cfg).unwrap();
        let mut corruption = CorruptionConfig::default();
        corruption.flip_label_rate = 0.2;
        corruption.erosion_dilation_px = 1;
        let obs = corrupt(&sample.gt.semantic, &corruption, 9);
        assert!(obs.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn blur_preserves_mass_in_interior() {
        // away from borders a normalized kernel preserves total mass
        let mut plane = Array2::<f32>::zeros((21, 21));
        plane[(10, 10)] = 1.0;
        let out = blur_separable(&plane, &gaussian_kernel(1.0));
        let total: f32 = out.iter().sum();
        assert!((total - 1.0).abs() < 1e-5);
    }
}
