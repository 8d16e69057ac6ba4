//! Comparison-figure rendering: observation, baseline prediction, refined
//! prediction, and ground truth side by side with a class-color legend.
//! Output is deterministic down to the byte.

use image::{Rgb, RgbImage};
use ndarray::Array3;
use std::path::Path;

use crate::error::Result;
use crate::mapgen::NUM_CLASSES;

/// Per-class colors, in class order (divider, ped crossing, boundary).
pub const CLASS_COLORS: [[u8; 3]; NUM_CLASSES] = [[235, 140, 40], [60, 200, 235], [95, 215, 120]];
pub const BACKGROUND: [u8; 3] = [18, 18, 22];
const PANEL_GAP: u32 = 4;
const LEGEND_HEIGHT: u32 = 24;
pub const LEGEND_SWATCH: u32 = 12;

/// Top-left pixel of legend swatch `k` (class order follows the manifest).
pub fn legend_swatch_origin(k: usize, img_height: u32) -> (u32, u32) {
    (6 + k as u32 * (LEGEND_SWATCH + 28), img_height - LEGEND_HEIGHT + 6)
}

pub struct RenderInputs<'a> {
    /// Continuous observation raster in `[0, 1]`.
    pub observation: &'a Array3<f32>,
    /// Baseline-head semantic masks (absent renders a flat panel).
    pub baseline_semantic: Option<&'a Array3<u8>>,
    /// Refined prediction masks (absent renders a flat panel).
    pub prediction: Option<&'a Array3<u8>>,
    pub gt: &'a Array3<u8>,
}

fn blend(px: &mut [u8; 3], color: [u8; 3], strength: f32) {
    for c in 0..3 {
        let v = px[c] as f32 + color[c] as f32 * strength;
        px[c] = v.min(255.0) as u8;
    }
}

fn draw_panel_continuous(img: &mut RgbImage, x0: u32, y0: u32, raster: &Array3<f32>) {
    let (_, h, w) = raster.dim();
    for i in 0..h {
        for j in 0..w {
            let mut px = BACKGROUND;
            for c in 0..NUM_CLASSES {
                let v = raster[(c, i, j)].clamp(0.0, 1.0);
                if v > 0.0 {
                    blend(&mut px, CLASS_COLORS[c], v);
                }
            }
            img.put_pixel(x0 + j as u32, y0 + i as u32, Rgb(px));
        }
    }
}

fn draw_panel_masks(img: &mut RgbImage, x0: u32, y0: u32, masks: &Array3<u8>) {
    let (_, h, w) = masks.dim();
    for i in 0..h {
        for j in 0..w {
            let mut px = BACKGROUND;
            for c in 0..NUM_CLASSES {
                if masks[(c, i, j)] > 0 {
                    blend(&mut px, CLASS_COLORS[c], 1.0);
                }
            }
            img.put_pixel(x0 + j as u32, y0 + i as u32, Rgb(px));
        }
    }
}

fn draw_flat(img: &mut RgbImage, x0: u32, y0: u32, h: u32, w: u32) {
    for i in 0..h {
        for j in 0..w {
            img.put_pixel(x0 + j, y0 + i, Rgb([60, 60, 64]));
        }
    }
}

/// Render the four panels plus legend into a PNG file.
pub fn render_comparison(inputs: &RenderInputs, out: &Path) -> Result<()> {
    let (_, h, w) = inputs.gt.dim();
    let (h, w) = (h as u32, w as u32);
    let legend_min = 6 + NUM_CLASSES as u32 * (LEGEND_SWATCH + 28);
    let img_w = (4 * w + 5 * PANEL_GAP).max(legend_min);
    let img_h = h + 2 * PANEL_GAP + LEGEND_HEIGHT;
    let mut img = RgbImage::from_pixel(img_w, img_h, Rgb([40, 40, 44]));

    let y0 = PANEL_GAP;
    let panel_x = |k: u32| PANEL_GAP + k * (w + PANEL_GAP);
    draw_panel_continuous(&mut img, panel_x(0), y0, inputs.observation);
    match inputs.baseline_semantic {
        Some(m) => draw_panel_masks(&mut img, panel_x(1), y0, m),
        None => draw_flat(&mut img, panel_x(1), y0, h, w),
    }
    match inputs.prediction {
        Some(m) => draw_panel_masks(&mut img, panel_x(2), y0, m),
        None => draw_flat(&mut img, panel_x(2), y0, h, w),
    }
    draw_panel_masks(&mut img, panel_x(3), y0, inputs.gt);

    // legend: one swatch per class in manifest order
    for (k, color) in CLASS_COLORS.iter().enumerate() {
        let (sx, sy) = legend_swatch_origin(k, img_h);
        for i in 0..LEGEND_SWATCH {
            for j in 0..LEGEND_SWATCH {
                img.put_pixel(sx + j, sy + i, Rgb(*color));
            }
        }
    }

    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    img.save(out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mapgen::{generate_scene, SceneConfig};

    #[test]
    fn empty_map_renders_background_panel() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("empty.png");
        let obs = Array3::<f32>::zeros((NUM_CLASSES, 16, 16));
        let gt = Array3::<u8>::zeros((NUM_CLASSES, 16, 16));
        render_comparison(
            &RenderInputs {
                observation: &obs,
                baseline_semantic: None,
                prediction: None,
                gt: &gt,
            },
            &out,
        )
        .unwrap();
        let img = image::open(&out).unwrap().to_rgb8();
        // probe a pixel inside the gt panel: background color
        let x = PANEL_GAP + 3 * (16 + PANEL_GAP) + 8;
        let y = PANEL_GAP + 8;
        assert_eq!(img.get_pixel(x, y).0, BACKGROUND);
    }

    #[test]
    fn render_is_byte_deterministic() {
        let cfg = SceneConfig::short_range();
        let sample = generate_scene(3, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.png");
        let b = dir.path().join("b.png");
        let inputs = RenderInputs {
            observation: &sample.observation,
            baseline_semantic: Some(&sample.gt.semantic),
            prediction: Some(&sample.gt.semantic),
            gt: &sample.gt.semantic,
        };
        render_comparison(&inputs, &a).unwrap();
        render_comparison(&inputs, &b).unwrap();
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    }

    #[test]
    fn legend_swatches_match_class_order() {
        let cfg = SceneConfig::short_range();
        let sample = generate_scene(4, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("fig.png");
        render_comparison(
            &RenderInputs {
                observation: &sample.observation,
                baseline_semantic: None,
                prediction: None,
                gt: &sample.gt.semantic,
            },
            &out,
        )
        .unwrap();
        let img = image::open(&out).unwrap().to_rgb8();
        for (k, color) in CLASS_COLORS.iter().enumerate() {
            let (sx, sy) = legend_swatch_origin(k, img.height());
            assert_eq!(
                img.get_pixel(sx + 2, sy + 2).0,
                *color,
                "legend swatch {k} color mismatch"
            );
        }
    }
}
