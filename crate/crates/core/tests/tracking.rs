//! Point tracking against an exhaustive scan.
//!
//! The acceptance runner also calls these checks, built without the test
//! harness.

mod common;

use common::{l1, normal_vec, rng, sample};
use dragtext_core::drag::tracking::track_points;
use dragtext_core::{FeatureMap, Point, PointSet};
use ndarray::Array3;
use rand::Rng;
use std::time::Instant;

fn brute_force(current: &Array3<f64>, original: &Array3<f64>, h0: Point, handle: Point, radius: usize) -> Point {
    let (_, h, w) = current.dim();
    let reference = sample(original, h0.row, h0.col);
    let (cr, cc) = (handle.row.round() as i64, handle.col.round() as i64);
    let r = radius as i64;
    let mut best: Option<(f64, Point)> = None;
    for row in 0..h as i64 {
        for col in 0..w as i64 {
            if (row - cr).abs() > r || (col - cc).abs() > r {
                continue;
            }
            let here: Vec<f64> = (0..current.dim().0).map(|ch| current[[ch, row as usize, col as usize]]).collect();
            let d = l1(&here, &reference);
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, Point::new(row as f64, col as f64)));
            }
        }
    }
    best.expect("window contains the rounded handle").1
}

pub fn tracking_matches_exhaustive_argmin() {
    let start = Instant::now();
    let mut r = rng(2024);
    for case in 0..100 {
        let radius = [1, 3, 12][case % 3];
        let (c, h, w) = (r.random_range(1..6), r.random_range(4..20), r.random_range(4..20));
        let mut array = |scale: f64| Array3::from_shape_vec((c, h, w), normal_vec(&mut r, c * h * w, scale)).unwrap();
        let original = array(1.0);
        // A noisy copy keeps the nearest match informative but not trivial.
        let current = &original + &array(0.5);
        let n = r.random_range(1..4);
        let mut pairs = Vec::new();
        for _ in 0..n {
            let p = |r: &mut rand_chacha::ChaCha8Rng| {
                Point::new(r.random_range(0.0..(h - 1) as f64), r.random_range(0.0..(w - 1) as f64))
            };
            pairs.push((p(&mut r), p(&mut r)));
        }
        let mut points = PointSet::new(&pairs).unwrap();
        for i in 0..n {
            let moved = Point::new(r.random_range(0.0..(h - 1) as f64), r.random_range(0.0..(w - 1) as f64));
            points.set_handle(i, moved);
        }
        if n > 1 && r.random_bool(0.5) {
            points.deactivate(0);
        }
        let fo = FeatureMap { values: original.clone(), source_block: 3 };
        let fc = FeatureMap { values: current.clone(), source_block: 3 };
        let got = track_points(&fc, &fo, &points, radius).unwrap();
        for i in 0..n {
            let expected = if points.is_active(i) {
                brute_force(&current, &original, points.initial_handles()[i], points.handles()[i], radius)
            } else {
                points.handles()[i]
            };
            assert_eq!(got[i], expected, "case {case} point {i} radius {radius}");
        }
    }
    assert!(start.elapsed().as_secs() < 30);
}

pub fn unchanged_features_track_to_the_rounded_initial_handle() {
    let mut r = rng(7);
    let f = Array3::from_shape_vec((4, 9, 9), normal_vec(&mut r, 4 * 81, 1.0)).unwrap();
    let fmap = FeatureMap { values: f, source_block: 3 };
    let points = PointSet::new(&[(Point::new(4.0, 3.0), Point::new(4.0, 8.0))]).unwrap();
    let got = track_points(&fmap, &fmap, &points, 3).unwrap();
    assert_eq!(got[0], Point::new(4.0, 3.0));
}

common::harness_tests!(
    tracking_matches_exhaustive_argmin,
    unchanged_features_track_to_the_rounded_initial_handle,
);
