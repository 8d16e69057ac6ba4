//! Polyline rasterization.
//!
//! A pixel is painted iff its center lies within `width_px * resolution / 2`
//! (Euclidean, meters) of the polyline, measured against the nearest segment.
//! Single-point polylines degenerate to a disc around the point.

use ndarray::Array2;

use crate::grid::GridSpec;

/// A painted pixel together with the tangent angle of the segment nearest to
/// it (radians in `[0, 2pi)`), used to derive direction bins.
#[derive(Debug, Clone, Copy)]
pub struct PaintedPixel {
    pub row: usize,
    pub col: usize,
    pub angle: f64,
}

fn segment_distance_sq(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let ap = [p[0] - a[0], p[1] - a[1]];
    let len_sq = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len_sq > 0.0 {
        ((ap[0] * ab[0] + ap[1] * ab[1]) / len_sq).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let cx = a[0] + t * ab[0] - p[0];
    let cy = a[1] + t * ab[1] - p[1];
    cx * cx + cy * cy
}

/// Paint a polyline, returning each covered pixel with its local tangent.
pub fn paint_polyline(points: &[[f64; 2]], width_px: usize, grid: &GridSpec) -> Vec<PaintedPixel> {
    assert!(width_px >= 1, "stroke width must be >= 1 px");
    if points.is_empty() {
        return Vec::new();
    }
    let radius = width_px as f64 * grid.resolution / 2.0;
    let radius_sq = radius * radius;
    let (h, w) = (grid.height_px, grid.width_px);

    // Closest-segment distance and angle per candidate pixel.
    let mut best: std::collections::HashMap<(usize, usize), (f64, f64)> =
        std::collections::HashMap::new();

    let segments: Vec<([f64; 2], [f64; 2])> = if points.len() == 1 {
        vec![(points[0], points[0])]
    } else {
        points.windows(2).map(|p| (p[0], p[1])).collect()
    };

    for (a, b) in segments {
        let angle = if a == b {
            0.0
        } else {
            (b[1] - a[1]).atan2(b[0] - a[0]).rem_euclid(std::f64::consts::TAU)
        };
        // Candidate pixel window: segment bounding box padded by the radius.
        let x_lo = a[0].min(b[0]) - radius;
        let x_hi = a[0].max(b[0]) + radius;
        let y_lo = a[1].min(b[1]) - radius;
        let y_hi = a[1].max(b[1]) + radius;
        let row_lo = (((x_lo - grid.x_range[0]) / grid.resolution).floor() as isize - 1).max(0) as usize;
        let row_hi =
            ((((x_hi - grid.x_range[0]) / grid.resolution).ceil() as isize + 1).max(0) as usize).min(h);
        let col_lo = (((y_lo - grid.y_range[0]) / grid.resolution).floor() as isize - 1).max(0) as usize;
        let col_hi =
            ((((y_hi - grid.y_range[0]) / grid.resolution).ceil() as isize + 1).max(0) as usize).min(w);
        for row in row_lo..row_hi {
            for col in col_lo..col_hi {
                let center = grid.pixel_center(row, col);
                let d = segment_distance_sq(center, a, b);
                if d <= radius_sq {
                    best.entry((row, col))
                        .and_modify(|(bd, ba)| {
                            if d < *bd {
                                *bd = d;
                                *ba = angle;
                            }
                        })
                        .or_insert((d, angle));
                }
            }
        }
    }

    let mut out: Vec<PaintedPixel> = best
        .into_iter()
        .map(|((row, col), (_, angle))| PaintedPixel { row, col, angle })
        .collect();
    out.sort_by_key(|p| (p.row, p.col));
    out
}

/// Rasterize a polyline into a binary mask.
pub fn rasterize_polyline(points: &[[f64; 2]], width_px: usize, grid: &GridSpec) -> Array2<u8> {
    let mut mask = Array2::zeros((grid.height_px, grid.width_px));
    for p in paint_polyline(points, width_px, grid) {
        mask[(p.row, p.col)] = 1;
    }
    mask
}
