//! Drag losses against plain-loop re-summations.
//!
//! The acceptance runner also calls these checks, built without the test
//! harness.

mod common;

use common::{l1, normal_vec, rng, sample, Case};
use dragtext_core::backend::{ddim_denoise_step, feature_map};
use dragtext_core::drag::DragLoop;
use dragtext_core::{Method, Point};
use ndarray::Array3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

const SIZE: usize = 8;
const INSTANCES: u64 = 50;
const TOL: f64 = 1e-10;

/// Randomises handles, latent and text of a fresh loop.
fn perturb(drag: &mut DragLoop<'_>, r: &mut ChaCha8Rng) {
    let n = drag.state().points.len();
    let max = (SIZE - 1) as f64;
    loop {
        let handles: Vec<Point> =
            (0..n).map(|_| Point::new(r.random_range(0.0..max), r.random_range(0.0..max))).collect();
        let targets = drag.state().points.targets().to_vec();
        if handles.iter().zip(&targets).any(|(h, g)| h.distance(g) > drag.config().reach_tolerance) {
            drag.set_handles(&handles);
            break;
        }
    }
    let z: Vec<f64> = drag.state().latent.as_slice().to_vec();
    let noise = normal_vec(r, z.len(), 0.05);
    drag.set_latent_values(z.iter().zip(&noise).map(|(a, b)| a + b).collect());
    let c: Vec<f64> = drag.state().text.as_slice().to_vec();
    let noise = normal_vec(r, c.len(), 0.05);
    drag.set_text_values(c.iter().zip(&noise).map(|(a, b)| a + b).collect());
}

fn in_bounds(row: f64, col: f64) -> bool {
    let max = (SIZE - 1) as f64;
    (0.0..=max).contains(&row) && (0.0..=max).contains(&col)
}

fn clamp(row: f64, col: f64) -> (f64, f64) {
    let max = (SIZE - 1) as f64;
    (row.clamp(0.0, max), col.clamp(0.0, max))
}

/// Unit direction handle to target, or `None` once within tolerance.
fn direction(h: Point, g: Point, tol: f64) -> Option<(f64, f64)> {
    let d = ((g.row - h.row).powi(2) + (g.col - h.col).powi(2)).sqrt();
    (d > tol && d > 0.0).then(|| ((g.row - h.row) / d, (g.col - h.col) / d))
}

/// Displacement sum for `method` using plain loops over the feature arrays.
fn displacement(drag: &DragLoop<'_>, f: &Array3<f64>, method: Method) -> f64 {
    let state = drag.state();
    let cfg = drag.config();
    let r = cfg.region_radius_ms as i64;
    let original = &state.cached().features().values;
    let mut total = 0.0;
    for i in 0..state.points.len() {
        if !state.points.is_active(i) {
            continue;
        }
        let h = state.points.handles()[i];
        let h0 = state.points.initial_handles()[i];
        let Some((dr, dc)) = direction(h, state.points.targets()[i], cfg.reach_tolerance) else { continue };
        for a in -r..=r {
            for b in -r..=r {
                let (qr, qc) = (h.row + a as f64, h.col + b as f64);
                if !in_bounds(qr, qc) {
                    continue;
                }
                let (step, reference) = match method {
                    Method::DragDiffusion => (1.0, sample(f, qr, qc)),
                    Method::FreeDrag | Method::GoodDrag => {
                        let (or, oc) = (h0.row + a as f64, h0.col + b as f64);
                        if !in_bounds(or, oc) {
                            continue;
                        }
                        let step = if method == Method::GoodDrag { 4.0 } else { 1.0 };
                        (step, sample(original, or, oc))
                    }
                    Method::DragNoise => unreachable!(),
                };
                let (mr, mc) = clamp(qr + step * dr, qc + step * dc);
                total += l1(&sample(f, mr, mc), &reference);
            }
        }
    }
    total
}

fn current_features(case: &Case, drag: &DragLoop<'_>) -> Array3<f64> {
    let s = drag.state();
    feature_map(&case.backend, &s.latent, s.latent.timestep, &s.text, drag.config().unet_block)
        .unwrap()
        .values
}

fn motion_supervision_oracle(case: &Case, drag: &DragLoop<'_>, method: Method) -> f64 {
    let s = drag.state();
    let f = current_features(case, drag);
    let prev = ddim_denoise_step(&case.backend, &s.latent, &s.text).unwrap();
    let anchor = drag.image_anchor();
    let mask = case.inputs.mask.values();
    let mut reg = 0.0;
    for ((ch, r, c), v) in prev.values.indexed_iter() {
        reg += (v - anchor.values[[ch, r, c]]).abs() * (1.0 - mask[[r, c]]);
    }
    displacement(drag, &f, method) + drag.config().lambda_image * reg
}

fn text_oracle(case: &Case, drag: &DragLoop<'_>, method: Method) -> f64 {
    let s = drag.state();
    let f = current_features(case, drag);
    let c0 = s.cached().text();
    let mut reg = 0.0;
    for ((row, col), v) in s.text.values.indexed_iter() {
        if row < c0.semantic_len() {
            reg += (v - c0.values[[row, col]]).abs();
        }
    }
    displacement(drag, &f, method) + drag.config().lambda_text * reg
}

fn check(method: Method, text: bool) {
    let mut r = rng(method as u64 * 31 + text as u64);
    for i in 0..INSTANCES {
        let case = Case::method(i, SIZE, method);
        let mut drag = case.drag();
        perturb(&mut drag, &mut r);
        let (got, expected) = if text {
            (drag.text_optimization_loss().unwrap().total, text_oracle(&case, &drag, method))
        } else {
            (drag.motion_supervision_loss().unwrap().total, motion_supervision_oracle(&case, &drag, method))
        };
        assert!(
            (got - expected).abs() <= TOL * expected.abs().max(1.0),
            "{method} text={text} instance {i}: {got} vs {expected}"
        );
    }
}

pub fn motion_supervision_loss_matches_resummation() {
    check(Method::DragDiffusion, false);
}

pub fn text_loss_matches_resummation() {
    check(Method::DragDiffusion, true);
}

pub fn freedrag_losses_match_resummation() {
    check(Method::FreeDrag, false);
    check(Method::FreeDrag, true);
}

pub fn gooddrag_losses_match_resummation() {
    check(Method::GoodDrag, false);
    check(Method::GoodDrag, true);
}

common::harness_tests!(
    motion_supervision_loss_matches_resummation,
    text_loss_matches_resummation,
    freedrag_losses_match_resummation,
    gooddrag_losses_match_resummation,
);
