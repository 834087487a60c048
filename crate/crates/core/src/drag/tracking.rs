//! Nearest-neighbour handle tracking.

use crate::domain::{FeatureMap, Point, PointSet};
use crate::drag::geometry::{bilinear_sample, square_region};
use crate::error::Result;

/// Lattice point in the square of radius `radius` around `center` whose
/// feature is closest in L1 to `reference`. Ties go to the first point in
/// row-major order. A real-valued center is rounded to the lattice first.
pub fn nearest_in_window(current: &FeatureMap, reference: &[f64], center: Point, radius: usize) -> Point {
    let (c, h, w) = current.dims();
    let center = Point::new(center.row.round(), center.col.round());
    let mut best = center;
    let mut best_dist = f64::INFINITY;
    for q in square_region(center, radius, h, w) {
        let (r, k) = (q.row as usize, q.col as usize);
        let dist: f64 = (0..c)
            .map(|ch| (current.values[[ch, r, k]] - reference[ch]).abs())
            .sum();
        if dist < best_dist {
            best_dist = dist;
            best = q;
        }
    }
    best
}

/// New positions for every handle: active ones are relocated against the
/// original feature at their initial position, retired ones stay put.
pub fn track_points(
    current: &FeatureMap,
    original: &FeatureMap,
    points: &PointSet,
    radius: usize,
) -> Result<Vec<Point>> {
    points
        .handles()
        .iter()
        .enumerate()
        .map(|(i, h)| {
            if !points.is_active(i) {
                return Ok(*h);
            }
            let reference = bilinear_sample(original, points.initial_handles()[i])?;
            Ok(nearest_in_window(current, &reference, *h, radius))
        })
        .collect()
}
