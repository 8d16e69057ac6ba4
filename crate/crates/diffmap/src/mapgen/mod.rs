//! Synthetic structured-map data: ground-truth generation, a corruption model
//! emulating sensor-induced artifacts, rasterization, padding, and the
//! canonical on-disk sample format.
//!
//! Maps carry three element classes — lane dividers, pedestrian crossings,
//! and road boundaries — rasterized as per-class binary masks together with
//! an instance-ID grid and a per-pixel direction-bin grid. The generator
//! guarantees the structural priors the rest of the system is supposed to
//! exploit: dividers within a road are mutually parallel curves and
//! pedestrian crossings are evenly spaced stripes perpendicular to the road
//! axis.

mod corrupt;
mod generate;
mod io;
mod raster;

pub use corrupt::corrupt;
pub use generate::{generate_scene, SceneConfig, StrokeWidths};
pub use io::{generate_dataset, load_sample, save_sample, Dataset, DatasetIndex, SAMPLE_MANIFEST};
pub use raster::{paint_polyline, rasterize_polyline, PaintedPixel};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::grid::GridSpec;

/// Map element classes, in channel order.
pub const NUM_CLASSES: usize = 3;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["divider", "ped_crossing", "boundary"];
pub const CLASS_DIVIDER: usize = 0;
pub const CLASS_PED: usize = 1;
pub const CLASS_BOUNDARY: usize = 2;

/// Direction bins: 10-degree sectors over the full circle, 0 = background.
pub const N_DIR: usize = 36;

/// Quantize an angle (radians) into a direction bin in `1..=N_DIR`.
pub fn direction_bin(angle: f64) -> u8 {
    let tau = std::f64::consts::TAU;
    let a = angle.rem_euclid(tau);
    let bin = (a / (tau / N_DIR as f64)).floor() as usize;
    (bin.min(N_DIR - 1) + 1) as u8
}

/// Center angle (radians) of a direction bin in `1..=N_DIR`.
pub fn bin_angle(bin: u8) -> f64 {
    let tau = std::f64::consts::TAU;
    (bin as f64 - 0.5) * tau / N_DIR as f64
}

/// Multi-channel rasterized ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticMap {
    /// Per-class binary masks, `NUM_CLASSES x H x W`, values in `{0, 1}`.
    pub semantic: Array3<u8>,
    /// Instance IDs, `H x W`, 0 = background, IDs contiguous from 1.
    pub instance: Array2<u16>,
    /// Direction bins, `H x W`, 0 = background, else `1..=N_DIR`.
    pub direction: Array2<u8>,
    pub grid: GridSpec,
}

impl SemanticMap {
    pub fn empty(grid: GridSpec) -> Self {
        let (h, w) = (grid.height_px, grid.width_px);
        SemanticMap {
            semantic: Array3::zeros((NUM_CLASSES, h, w)),
            instance: Array2::zeros((h, w)),
            direction: Array2::zeros((h, w)),
            grid,
        }
    }

    pub fn height(&self) -> usize {
        self.semantic.dim().1
    }

    pub fn width(&self) -> usize {
        self.semantic.dim().2
    }

    pub fn num_instances(&self) -> usize {
        self.instance.iter().map(|&v| v as usize).max().unwrap_or(0)
    }

    /// Check every structural invariant; returns the first violation found.
    pub fn validate(&self) -> Result<()> {
        let (c, h, w) = self.semantic.dim();
        if c != NUM_CLASSES {
            return Err(Error::data(format!("semantic has {c} channels, need {NUM_CLASSES}")));
        }
        if self.instance.dim() != (h, w) || self.direction.dim() != (h, w) {
            return Err(Error::data("instance/direction shape mismatch".to_string()));
        }
        if self.grid.height_px != h || self.grid.width_px != w {
            return Err(Error::data("grid does not match raster shape".to_string()));
        }
        if self.semantic.iter().any(|&v| v > 1) {
            return Err(Error::data("semantic masks must be {0,1}-valued".to_string()));
        }
        let mut max_id = 0u16;
        for i in 0..h {
            for j in 0..w {
                let inst = self.instance[(i, j)];
                max_id = max_id.max(inst);
                if inst > 0 && (0..c).all(|ci| self.semantic[(ci, i, j)] == 0) {
                    return Err(Error::data(format!(
                        "instance pixel ({i},{j}) has no semantic support"
                    )));
                }
                let dir = self.direction[(i, j)];
                if dir as usize > N_DIR {
                    return Err(Error::data(format!("direction bin {dir} out of range")));
                }
                if dir > 0 && inst == 0 {
                    return Err(Error::data(format!(
                        "direction pixel ({i},{j}) has no instance"
                    )));
                }
            }
        }
        let mut seen = vec![false; max_id as usize + 1];
        for &v in self.instance.iter() {
            seen[v as usize] = true;
        }
        for id in 1..=max_id as usize {
            if !seen[id] {
                return Err(Error::data(format!("instance IDs not contiguous: {id} missing")));
            }
        }
        Ok(())
    }

    /// Per-pixel class index for the softmax segmentation head: 0 is
    /// background, overlaps resolve by fixed priority divider < ped < boundary.
    pub fn class_index_map(&self) -> Array2<usize> {
        let (_, h, w) = self.semantic.dim();
        Array2::from_shape_fn((h, w), |(i, j)| {
            let mut cls = 0usize;
            for c in 0..NUM_CLASSES {
                if self.semantic[(c, i, j)] > 0 {
                    cls = c + 1;
                }
            }
            cls
        })
    }
}

/// One training/evaluation unit: clean ground truth plus the corrupted
/// observation raster standing in for a sensor pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct MapSample {
    pub gt: SemanticMap,
    /// `NUM_CLASSES x H x W` real-valued raster in `[0, 1]`.
    pub observation: Array3<f32>,
    pub scene_seed: u64,
    pub meta: BTreeMap<String, String>,
}

impl MapSample {
    pub fn validate(&self) -> Result<()> {
        self.gt.validate()?;
        let (c, h, w) = self.observation.dim();
        if (c, h, w) != self.gt.semantic.dim() {
            return Err(Error::data("observation shape differs from gt".to_string()));
        }
        if self.observation.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::data("observation values outside [0, 1]".to_string()));
        }
        Ok(())
    }
}

/// Knobs of the corruption model, applied in the fixed order
/// dropout -> morphology -> jitter -> blur -> label flip.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct CorruptionConfig {
    /// Fraction of the grid area covered by dropout patches, in `[0, 1]`.
    pub dropout_patch_rate: f64,
    /// Side length of each square dropout patch, pixels.
    pub patch_size_px: usize,
    /// Gaussian blur sigma, pixels.
    pub blur_sigma_px: f64,
    /// Standard deviation of per-pixel displacement, pixels.
    pub jitter_px: f64,
    /// Radius for the erosion-then-dilation pass, pixels.
    pub erosion_dilation_px: usize,
    /// Per-pixel probability of flipping the value, in `[0, 1]`.
    pub flip_label_rate: f64,
}

impl CorruptionConfig {
    pub fn none() -> Self {
        CorruptionConfig {
            dropout_patch_rate: 0.0,
            patch_size_px: 0,
            blur_sigma_px: 0.0,
            jitter_px: 0.0,
            erosion_dilation_px: 0,
            flip_label_rate: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, rate) in [
            ("dropout_patch_rate", self.dropout_patch_rate),
            ("flip_label_rate", self.flip_label_rate),
        ] {
            if !(0.0..=1.0).contains(&rate) {
                return Err(Error::config(format!("{name} = {rate} outside [0, 1]")));
            }
        }
        if self.blur_sigma_px < 0.0 || self.jitter_px < 0.0 {
            return Err(Error::config("blur/jitter sigma must be nonnegative".to_string()));
        }
        Ok(())
    }
}

impl Default for CorruptionConfig {
    /// Defaults tuned so the observation keeps most structure but loses the
    /// fine properties: stripes merge or break and dividers get interrupted.
    fn default() -> Self {
        CorruptionConfig {
            dropout_patch_rate: 0.10,
            patch_size_px: 7,
            blur_sigma_px: 1.1,
            jitter_px: 0.5,
            erosion_dilation_px: 0,
            flip_label_rate: 0.002,
        }
    }
}

/// One vectorized map element: an ordered point list in meters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polyline {
    pub class_id: usize,
    pub confidence: f64,
    pub points: Vec<[f64; 2]>,
}

impl Polyline {
    pub fn length(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt())
            .sum()
    }
}

/// A set of vectorized instances, the unit the instance metrics consume.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PolylineSet {
    pub items: Vec<Polyline>,
}

impl PolylineSet {
    pub fn validate(&self) -> Result<()> {
        for (i, p) in self.items.iter().enumerate() {
            if p.points.is_empty() {
                return Err(Error::data(format!("polyline {i} has no points")));
            }
            if p.class_id >= NUM_CLASSES {
                return Err(Error::data(format!("polyline {i} class {} invalid", p.class_id)));
            }
            if !(0.0..=1.0).contains(&p.confidence) {
                return Err(Error::data(format!("polyline {i} confidence out of range")));
            }
        }
        Ok(())
    }

    pub fn of_class(&self, class_id: usize) -> impl Iterator<Item = &Polyline> {
        self.items.iter().filter(move |p| p.class_id == class_id)
    }
}

/// Bookkeeping for [`pad_to_multiple`]: original extent so padding can be
/// cropped away exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PadInfo {
    pub orig_h: usize,
    pub orig_w: usize,
}

/// Zero-pad a `C x H x W` raster on the bottom/right to the smallest
/// multiples of `k`.
pub fn pad_to_multiple<A: Clone + num_traits::Zero>(
    x: &Array3<A>,
    k: usize,
) -> (Array3<A>, PadInfo) {
    assert!(k >= 1, "pad multiple must be >= 1");
    let (c, h, w) = x.dim();
    let ph = h.div_ceil(k) * k;
    let pw = w.div_ceil(k) * k;
    let mut out = Array3::from_elem((c, ph, pw), A::zero());
    out.slice_mut(ndarray::s![.., ..h, ..w]).assign(x);
    (out, PadInfo { orig_h: h, orig_w: w })
}

/// Crop padding added by [`pad_to_multiple`].
pub fn crop_padding<A: Clone>(x: &Array3<A>, info: PadInfo) -> Array3<A> {
    x.slice(ndarray::s![.., ..info.orig_h, ..info.orig_w]).to_owned()
}

/// Pad a whole [`SemanticMap`] (masks, instances, directions, grid extents).
pub fn pad_semantic_map(map: &SemanticMap, k: usize) -> (SemanticMap, PadInfo) {
    let (sem, info) = pad_to_multiple(&map.semantic, k);
    let (h, w) = (sem.dim().1, sem.dim().2);
    let mut instance = Array2::zeros((h, w));
    instance
        .slice_mut(ndarray::s![..info.orig_h, ..info.orig_w])
        .assign(&map.instance);
    let mut direction = Array2::zeros((h, w));
    direction
        .slice_mut(ndarray::s![..info.orig_h, ..info.orig_w])
        .assign(&map.direction);
    let mut grid = map.grid;
    grid.height_px = h;
    grid.width_px = w;
    grid.x_range[1] = grid.x_range[0] + h as f64 * grid.resolution;
    grid.y_range[1] = grid.y_range[0] + w as f64 * grid.resolution;
    (
        SemanticMap {
            semantic: sem,
            instance,
            direction,
            grid,
        },
        info,
    )
}
