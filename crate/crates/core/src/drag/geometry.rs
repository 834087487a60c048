//! Sampling positions on the feature grid.

use std::sync::Arc;

use crate::autodiff::{Gather, Tape, Var};
use crate::domain::{FeatureMap, Point};
use crate::error::{DragError, Result};

/// Bilinear corner weights `(row, col, weight)` for a position inside
/// `[0, H-1] x [0, W-1]`.
pub fn bilinear_corners(pos: Point, height: usize, width: usize) -> [(usize, usize, f64); 4] {
    let r0 = (pos.row.floor() as usize).min(height - 1);
    let c0 = (pos.col.floor() as usize).min(width - 1);
    let r1 = (r0 + 1).min(height - 1);
    let c1 = (c0 + 1).min(width - 1);
    let fr = pos.row - r0 as f64;
    let fc = pos.col - c0 as f64;
    [
        (r0, c0, (1.0 - fr) * (1.0 - fc)),
        (r0, c1, (1.0 - fr) * fc),
        (r1, c0, fr * (1.0 - fc)),
        (r1, c1, fr * fc),
    ]
}

fn check_position(pos: Point, height: usize, width: usize) -> Result<()> {
    if pos.in_bounds(height, width) {
        Ok(())
    } else {
        Err(DragError::OutOfBounds(pos.row, pos.col))
    }
}

/// Feature vector at a real-valued position.
pub fn bilinear_sample(fmap: &FeatureMap, pos: Point) -> Result<Vec<f64>> {
    let (c, h, w) = fmap.dims();
    check_position(pos, h, w)?;
    let corners = bilinear_corners(pos, h, w);
    Ok((0..c)
        .map(|ch| {
            corners
                .iter()
                .map(|(r, cc, wt)| wt * fmap.values[[ch, *r, *cc]])
                .sum()
        })
        .collect())
}

/// Sampled vector plus its partial derivatives with respect to row and
/// column. On a lattice line the derivative is taken from the cell below/right.
pub fn bilinear_sample_with_position_grad(
    fmap: &FeatureMap,
    pos: Point,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let (c, h, w) = fmap.dims();
    check_position(pos, h, w)?;
    let r0 = (pos.row.floor() as usize).min(h.saturating_sub(2));
    let c0 = (pos.col.floor() as usize).min(w.saturating_sub(2));
    let r1 = (r0 + 1).min(h - 1);
    let c1 = (c0 + 1).min(w - 1);
    let fr = pos.row - r0 as f64;
    let fc = pos.col - c0 as f64;
    let f = |ch: usize, r: usize, cc: usize| fmap.values[[ch, r, cc]];
    let mut value = Vec::with_capacity(c);
    let mut d_row = Vec::with_capacity(c);
    let mut d_col = Vec::with_capacity(c);
    for ch in 0..c {
        let (a, b, cc, d) = (f(ch, r0, c0), f(ch, r0, c1), f(ch, r1, c0), f(ch, r1, c1));
        value.push(a * (1.0 - fr) * (1.0 - fc) + b * (1.0 - fr) * fc + cc * fr * (1.0 - fc) + d * fr * fc);
        d_row.push(if r1 == r0 { 0.0 } else { (cc - a) * (1.0 - fc) + (d - b) * fc });
        d_col.push(if c1 == c0 { 0.0 } else { (b - a) * (1.0 - fr) + (d - cc) * fr });
    }
    Ok((value, d_row, d_col))
}

/// Clamps a position onto the grid.
pub fn clamp_to_grid(pos: Point, height: usize, width: usize) -> Point {
    Point::new(
        pos.row.clamp(0.0, (height - 1) as f64),
        pos.col.clamp(0.0, (width - 1) as f64),
    )
}

/// Integer offsets `(dr, dc)` of the square of radius `radius` that stay in
/// bounds around `center`, in row-major order.
pub fn region_offsets(center: Point, radius: usize, height: usize, width: usize) -> Vec<(i64, i64)> {
    let r = radius as i64;
    let mut out = Vec::with_capacity(((2 * r + 1) * (2 * r + 1)) as usize);
    for dr in -r..=r {
        for dc in -r..=r {
            let p = Point::new(center.row + dr as f64, center.col + dc as f64);
            if p.in_bounds(height, width) {
                out.push((dr, dc));
            }
        }
    }
    out
}

/// All grid points within Chebyshev distance `radius` of `center`, clipped
/// to bounds, row-major.
pub fn square_region(center: Point, radius: usize, height: usize, width: usize) -> Vec<Point> {
    region_offsets(center, radius, height, width)
        .into_iter()
        .map(|(dr, dc)| Point::new(center.row + dr as f64, center.col + dc as f64))
        .collect()
}

/// Unit step from handle toward target, or `None` once the handle is within
/// `tolerance` of the target.
pub fn drag_direction(handle: Point, target: Point, tolerance: f64) -> Option<(f64, f64)> {
    let dist = handle.distance(&target);
    if dist <= tolerance || dist == 0.0 {
        return None;
    }
    Some(((target.row - handle.row) / dist, (target.col - handle.col) / dist))
}

/// Bilinear samples of a `C x H x W` tape tensor at `positions`, returned as
/// a position-major `n x C` tensor. Positions must already lie on the grid.
pub fn sample_on_tape(tape: &Tape, fmap: Var, dims: (usize, usize, usize), positions: &[Point]) -> Var {
    let (c, h, w) = dims;
    let mut g = Gather::new(c * h * w);
    for p in positions {
        let corners = bilinear_corners(*p, h, w);
        for ch in 0..c {
            g.push_row(
                corners
                    .iter()
                    .filter(|(_, _, wt)| *wt != 0.0)
                    .map(|(r, cc, wt)| (ch * h * w + r * w + cc, *wt)),
            );
        }
    }
    tape.gather(fmap, Arc::new(g))
}
