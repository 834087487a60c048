//! Reverse-mode gradients against central finite differences.
//!
//! The acceptance runner also calls these checks, built without the test
//! harness.

mod common;

use common::{dot, normal_vec, rng, Case};
use dragtext_core::autodiff::{Tape, Var};
use dragtext_core::backend::{denoise_step_on_tape, DiffusionBackend, GridDims};
use dragtext_core::drag::geometry::bilinear_sample;
use dragtext_core::drag::loss::{anchored_l1, displacement_term, PointTerm, Reference};
use dragtext_core::drag::DragLoop;
use dragtext_core::Method;
use std::time::Instant;

const STEP: f64 = 1e-4;
const TOLERANCE: f64 = 1e-4;
const SIZE: usize = 10;

/// Central difference of `eval` along `dir` compared with `grad . dir`.
/// `eval` returns the value and the sign pattern of its L1 arguments;
/// `None` means the step flipped a nonzero sign, i.e. crossed a kink.
fn directional_error(eval: &dyn Fn(&[f64]) -> (f64, Vec<i8>), x: &[f64], grad: &[f64], dir: &[f64]) -> Option<f64> {
    let shifted = |s: f64| -> Vec<f64> { x.iter().zip(dir).map(|(a, d)| a + s * d).collect() };
    let (_, base) = eval(x);
    let (f_plus, sig_plus) = eval(&shifted(STEP));
    let (f_minus, sig_minus) = eval(&shifted(-STEP));
    let flips = |other: &[i8]| base.iter().zip(other).any(|(a, b)| *a != 0 && a != b);
    if flips(&sig_plus) || flips(&sig_minus) {
        return None;
    }
    let fd = (f_plus - f_minus) / (2.0 * STEP);
    let analytic = dot(grad, dir);
    let scale = fd.abs().max(analytic.abs());
    Some(if scale == 0.0 { 0.0 } else { (fd - analytic).abs() / scale })
}

fn check_directional(label: &str, seed: u64, eval: &dyn Fn(&[f64]) -> (f64, Vec<i8>), x: &[f64], grad: &[f64]) {
    let mut r = rng(seed ^ 0xfd);
    for _ in 0..20 {
        let dir = normal_vec(&mut r, x.len(), 1.0);
        if let Some(err) = directional_error(eval, x, grad, &dir) {
            assert!(err < TOLERANCE, "{label} seed {seed}: relative error {err:e}");
            return;
        }
    }
    panic!("{label} seed {seed}: every direction crossed a kink");
}

/// A drag loop a few iterations in, so the L1 arguments sit away from zero.
fn warmed_loop(case: &Case) -> DragLoop<'_> {
    let mut drag = case.drag();
    for _ in 0..3 {
        drag.step().unwrap();
    }
    drag
}

/// Displacement terms with every stop-gradient reference replaced by its
/// current value, so the loss is an ordinary function of the inputs whose
/// derivative is the stop-gradient derivative.
fn frozen_terms(drag: &DragLoop<'_>) -> Vec<PointTerm> {
    let features = drag.current_features().unwrap();
    drag.terms(None)
        .unwrap()
        .into_iter()
        .map(|mut term| {
            if let Reference::Detached(at) = &term.reference {
                let values = at.iter().flat_map(|p| bilinear_sample(&features, *p).unwrap()).collect();
                term.reference = Reference::Fixed(values);
            }
            term
        })
        .collect()
}

/// `L_ms` (with `wrt_text = false`) or `L_text` evaluated at `x`, holding
/// the other argument at the loop's current value.
fn frozen_loss(case: &Case, drag: &DragLoop<'_>, terms: &[PointTerm], x: &[f64], wrt_text: bool) -> (f64, Vec<i8>) {
    let backend: &dyn DiffusionBackend = &case.backend;
    let state = drag.state();
    let cfg = drag.config();
    let (channels, h, w) = state.latent.dims();
    let dims = GridDims::new(h, w);
    let t = state.latent.timestep;
    let tape = Tape::new();
    let (zv, cv) = if wrt_text {
        (tape.constant(state.latent.as_slice().to_vec()), tape.param(x.to_vec()))
    } else {
        (tape.param(x.to_vec()), tape.constant(state.text.as_slice().to_vec()))
    };
    let f = backend.features_on_tape(&tape, zv, dims, t, cv, cfg.unet_block).unwrap();
    let fdims = (backend.feature_channels(cfg.unet_block), h, w);
    let disp = displacement_term(&tape, f, fdims, terms).unwrap().total;
    let reg = if wrt_text {
        let original = state.cached().text();
        let weights: Vec<f64> = original.token_mask().iter().copied().collect();
        anchored_l1(&tape, cv, original.as_slice(), &weights, cfg.lambda_text)
    } else {
        let prev = denoise_step_on_tape(backend, &tape, zv, dims, t, cv).unwrap();
        let weights = case.inputs.mask.frozen_weights(channels);
        anchored_l1(&tape, prev, drag.image_anchor().as_slice(), &weights, cfg.lambda_image)
    };
    let total = tape.add(disp, reg);
    (tape.scalar(total), tape.abs_signature())
}

pub fn motion_supervision_gradient_matches_finite_differences() {
    let start = Instant::now();
    for method in [Method::DragDiffusion, Method::GoodDrag] {
        for seed in 0..5 {
            let case = Case::method(seed, SIZE, method);
            let drag = warmed_loop(&case);
            let terms = frozen_terms(&drag);
            let x = drag.state().latent.as_slice().to_vec();
            let (loss, grad, _) = drag.motion_supervision_gradient().unwrap();
            let eval = |z: &[f64]| frozen_loss(&case, &drag, &terms, z, false);
            assert!((eval(&x).0 - loss.total).abs() < 1e-10);
            check_directional(&format!("dL_ms/dz {method}"), seed, &eval, &x, &grad);
        }
    }
    assert!(start.elapsed().as_secs() < 60);
}

pub fn text_gradient_matches_finite_differences() {
    for seed in 0..5 {
        let case = Case::method(seed, SIZE, Method::DragDiffusion);
        let drag = warmed_loop(&case);
        let terms = frozen_terms(&drag);
        let x = drag.state().text.as_slice().to_vec();
        let (loss, grad) = drag.text_gradient().unwrap();
        let eval = |c: &[f64]| frozen_loss(&case, &drag, &terms, c, true);
        assert!((eval(&x).0 - loss.total).abs() < 1e-10);
        check_directional("dL_text/dc", seed, &eval, &x, &grad);
    }
}

/// Gradient of `sum(weights * out(z, c))` with respect to `z` or `c`.
fn projected_gradient(
    z: &[f64],
    c: &[f64],
    weights: &[f64],
    wrt_text: bool,
    output: &dyn Fn(&Tape, Var, Var) -> Var,
) -> (f64, Vec<f64>) {
    let tape = Tape::new();
    let (zv, cv) = if wrt_text {
        (tape.constant(z.to_vec()), tape.param(c.to_vec()))
    } else {
        (tape.param(z.to_vec()), tape.constant(c.to_vec()))
    };
    let out = output(&tape, zv, cv);
    let w = tape.constant(weights.to_vec());
    let s = tape.sum(tape.mul(out, w));
    let grads = tape.backward(s);
    let target = if wrt_text { cv } else { zv };
    let len = if wrt_text { c.len() } else { z.len() };
    (tape.scalar(s), grads.wrt_or_zeros(target, len))
}

fn network_gradient_suite(label: &str, wrt_text: bool, features: bool) {
    for seed in 0..5 {
        let case = Case::method(seed, SIZE, Method::DragDiffusion);
        let drag = case.drag();
        let z = drag.state().latent.as_slice().to_vec();
        let c = drag.state().text.as_slice().to_vec();
        let (_, h, w) = drag.state().latent.dims();
        let dims = GridDims::new(h, w);
        let t = drag.state().latent.timestep;
        let backend: &dyn DiffusionBackend = &case.backend;
        let output = |tape: &Tape, zv, cv| {
            if features {
                backend.features_on_tape(tape, zv, dims, t, cv, 3).unwrap()
            } else {
                backend.noise_on_tape(tape, zv, dims, t, cv).unwrap()
            }
        };
        let out_len = if features { backend.feature_channels(3) * h * w } else { z.len() };
        let weights = normal_vec(&mut rng(seed ^ 0x77), out_len, 1.0);
        let (_, grad) = projected_gradient(&z, &c, &weights, wrt_text, &output);
        let eval = |x: &[f64]| {
            let (zz, cc) = if wrt_text { (z.clone(), x.to_vec()) } else { (x.to_vec(), c.clone()) };
            (projected_gradient(&zz, &cc, &weights, wrt_text, &output).0, Vec::new())
        };
        let x = if wrt_text { c.clone() } else { z.clone() };
        check_directional(label, seed, &eval, &x, &grad);
    }
}

pub fn noise_gradient_wrt_latent_matches_finite_differences() {
    network_gradient_suite("deps/dz", false, false);
}

pub fn noise_gradient_wrt_text_matches_finite_differences() {
    network_gradient_suite("deps/dc", true, false);
}

pub fn feature_gradient_wrt_text_matches_finite_differences() {
    network_gradient_suite("dF/dc", true, true);
}

common::harness_tests!(
    motion_supervision_gradient_matches_finite_differences,
    text_gradient_matches_finite_differences,
    noise_gradient_wrt_latent_matches_finite_differences,
    noise_gradient_wrt_text_matches_finite_differences,
    feature_gradient_wrt_text_matches_finite_differences,
);
