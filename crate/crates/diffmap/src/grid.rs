//! BEV grid geometry.
//!
//! Maps live on a regular metric grid. Row index `i` runs along the driving
//! direction `x` (forward), column index `j` runs along the lateral axis `y`.
//! A 448-row grid at 0.15 m/px therefore spans 67.2 m of road ahead.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Geometry of a rasterized BEV map: pixel counts, metric resolution, and the
/// metric extents the grid covers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Number of rows; rows run along the longitudinal x axis.
    pub height_px: usize,
    /// Number of columns; columns run along the lateral y axis.
    pub width_px: usize,
    /// Meters per pixel.
    pub resolution: f64,
    /// Longitudinal extent in meters, `[x_min, x_max)`.
    pub x_range: [f64; 2],
    /// Lateral extent in meters, `[y_min, y_max)`.
    pub y_range: [f64; 2],
}

impl GridSpec {
    /// Build a grid from pixel counts and resolution with `x` starting at 0
    /// and `y` centered on the ego axis.
    pub fn new(height_px: usize, width_px: usize, resolution: f64) -> Result<Self> {
        let spec = GridSpec {
            height_px,
            width_px,
            resolution,
            x_range: [0.0, height_px as f64 * resolution],
            y_range: [
                -(width_px as f64) * resolution / 2.0,
                width_px as f64 * resolution / 2.0,
            ],
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Default short-range grid: 128 x 64 px at 0.15 m/px (19.2 m x 9.6 m).
    pub fn short_range() -> Self {
        GridSpec::new(128, 64, 0.15).expect("valid preset")
    }

    /// Long-range grid: 448 x 256 px at 0.15 m/px (67.2 m x 38.4 m).
    pub fn long_range() -> Self {
        GridSpec::new(448, 256, 0.15).expect("valid preset")
    }

    pub fn validate(&self) -> Result<()> {
        if self.height_px == 0 || self.width_px == 0 {
            return Err(Error::config("grid has zero size"));
        }
        if !(self.resolution > 0.0) {
            return Err(Error::config("grid resolution must be positive"));
        }
        let x_span = self.x_range[1] - self.x_range[0];
        let y_span = self.y_range[1] - self.y_range[0];
        let tol = self.resolution;
        if (self.height_px as f64 * self.resolution - x_span).abs() > tol {
            return Err(Error::config(format!(
                "height {} px at {} m/px does not span x_range {:?}",
                self.height_px, self.resolution, self.x_range
            )));
        }
        if (self.width_px as f64 * self.resolution - y_span).abs() > tol {
            return Err(Error::config(format!(
                "width {} px at {} m/px does not span y_range {:?}",
                self.width_px, self.resolution, self.y_range
            )));
        }
        Ok(())
    }

    /// Metric coordinates of the center of pixel `(row, col)`.
    pub fn pixel_center(&self, row: usize, col: usize) -> [f64; 2] {
        [
            self.x_range[0] + (row as f64 + 0.5) * self.resolution,
            self.y_range[0] + (col as f64 + 0.5) * self.resolution,
        ]
    }

    /// Pixel indices containing the metric point, if inside the grid.
    pub fn point_to_pixel(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let row = (x - self.x_range[0]) / self.resolution;
        let col = (y - self.y_range[0]) / self.resolution;
        if row < 0.0 || col < 0.0 {
            return None;
        }
        let (row, col) = (row.floor() as usize, col.floor() as usize);
        if row < self.height_px && col < self.width_px {
            Some((row, col))
        } else {
            None
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_consistent() {
        for spec in [GridSpec::short_range(), GridSpec::long_range()] {
            spec.validate().unwrap();
            assert_eq!(spec.resolution, 0.15);
        }
        let long = GridSpec::long_range();
        assert_eq!(long.height_px, 448);
        assert!((long.x_range[1] - 67.2).abs() < 1e-9);
    }

    #[test]
    fn zero_size_rejected() {
        assert!(GridSpec::new(0, 10, 0.15).is_err());
        assert!(GridSpec::new(10, 0, 0.15).is_err());
        assert!(GridSpec::new(10, 10, 0.0).is_err());
    }

    #[test]
    fn pixel_center_round_trip() {
        let spec = GridSpec::short_range();
        let [x, y] = spec.pixel_center(5, 7);
        assert_eq!(spec.point_to_pixel(x, y), Some((5, 7)));
        assert_eq!(spec.point_to_pixel(-1.0, 0.0), None);
        assert_eq!(spec.point_to_pixel(1000.0, 0.0), None);
    }
}
