//! Seeded synthetic drag sessions for the toy backend: smooth colour blobs on
//! a gradient background, one or two handle/target pairs, and an edit mask
//! covering the drag paths.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::domain::{EditMask, ImageTensor, Point, PointSet};

/// A ready-to-run synthetic session in feature-grid coordinates.
#[derive(Debug, Clone)]
pub struct Scene {
    pub image: ImageTensor,
    pub mask: EditMask,
    pub points: PointSet,
    pub prompt: String,
}

const PROMPTS: [&str; 4] = [
    "a photo of a jug and a glass",
    "a red ball on a wooden table",
    "a small bird sitting on a branch",
    "a cup of coffee next to a book",
];

/// Builds scene `seed` at `size x size` with `pairs` drag pairs.
pub fn synthetic_scene(seed: u64, size: usize, pairs: usize) -> Scene {
    assert!(size >= 8, "scenes need at least an 8x8 grid");
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ 0x5ce4e);
    let s = size as f64;

    let bg_a: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.15..0.45));
    let bg_b: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.15..0.45));
    let mut img = Array3::from_shape_fn((3, size, size), |(c, y, x)| {
        let u = (x + y) as f64 / (2.0 * (s - 1.0));
        bg_a[c] * (1.0 - u) + bg_b[c] * u
    });

    let mut pts = Vec::with_capacity(pairs);
    let margin = 2.0_f64.max(s * 0.15);
    for _ in 0..pairs {
        let center = Point::new(
            rng.random_range(margin..s - 1.0 - margin).round(),
            rng.random_range(margin..s - 1.0 - margin).round(),
        );
        let radius = rng.random_range(1.5..2.2);
        let color: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.55..0.95));
        for y in 0..size {
            for x in 0..size {
                let d2 = (y as f64 - center.row).powi(2) + (x as f64 - center.col).powi(2);
                let a = (-d2 / (2.0 * radius * radius)).exp();
                for c in 0..3 {
                    img[[c, y, x]] = img[[c, y, x]] * (1.0 - a) + color[c] * a;
                }
            }
        }
        let dist = rng.random_range(0.18 * s..0.28 * s);
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        let target = Point::new(
            (center.row + dist * angle.sin()).round().clamp(0.0, s - 1.0),
            (center.col + dist * angle.cos()).round().clamp(0.0, s - 1.0),
        );
        pts.push((center, target));
    }

    let pad = 3.0;
    let mask = Array2::from_shape_fn((size, size), |(y, x)| {
        let inside = pts.iter().any(|(h, g)| {
            let (r0, r1) = (h.row.min(g.row) - pad, h.row.max(g.row) + pad);
            let (c0, c1) = (h.col.min(g.col) - pad, h.col.max(g.col) + pad);
            (r0..=r1).contains(&(y as f64)) && (c0..=c1).contains(&(x as f64))
        });
        if inside {
            1.0
        } else {
            0.0
        }
    });

    Scene {
        image: ImageTensor::new(img).expect("scene pixels are in range"),
        mask: EditMask::new(mask).expect("mask covers the handles"),
        points: PointSet::new(&pts).expect("at least one pair"),
        prompt: PROMPTS[(seed % PROMPTS.len() as u64) as usize].to_string(),
    }
}
