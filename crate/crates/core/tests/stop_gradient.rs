//! Stop-gradient boundaries in the drag losses.
//!
//! The acceptance runner also calls these checks, built without the test
//! harness.

mod common;

use common::{normal_vec, rng, Case};
use dragtext_core::autodiff::Tape;
use dragtext_core::drag::geometry::bilinear_sample;
use dragtext_core::drag::loss::{displacement_term, PointTerm, Reference};
use dragtext_core::{Method, Point};

pub fn detach_produces_an_untracked_leaf() {
    let tape = Tape::new();
    let z = tape.param(vec![0.3, -1.2, 2.0]);
    let y = tape.tanh(z);
    let d = tape.detach(y);
    assert_eq!(tape.value(d), tape.value(y));
    assert!(tape.is_tracked(y));
    assert!(!tape.is_tracked(d));
    assert!(tape.parents(d).is_empty());
    assert!(!tape.depends_on(d, z));
    let out = tape.sum(tape.mul(y, d));
    let g = tape.backward(out);
    // d/dz [tanh(z) * sg(tanh(z))] = sg(tanh(z)) * (1 - tanh^2)
    let expected: Vec<f64> = tape.value(y).iter().map(|t| t * (1.0 - t * t)).collect();
    assert_eq!(g.wrt(z).unwrap(), expected.as_slice());
    assert!(g.wrt(d).is_none());
}

pub fn detached_reference_gradient_equals_constant_reference_gradient() {
    let (c, h, w) = (3, 6, 7);
    for seed in 0..20 {
        let mut r = rng(seed);
        let values = normal_vec(&mut r, c * h * w, 1.0);
        let at = vec![Point::new(2.0, 3.0), Point::new(2.5, 3.25), Point::new(4.0, 1.0)];
        let moved: Vec<Point> = at.iter().map(|p| Point::new(p.row + 0.6, p.col + 0.8)).collect();

        let tape = Tape::new();
        let f = tape.param(values.clone());
        let term = PointTerm { index: 0, weight: 1.0, moved: moved.clone(), reference: Reference::Detached(at.clone()) };
        let detached = displacement_term(&tape, f, (c, h, w), &[term]).unwrap();
        let g_detached = tape.backward(detached.total).wrt(f).unwrap().to_vec();

        let fmap = dragtext_core::FeatureMap {
            values: ndarray::Array3::from_shape_vec((c, h, w), values.clone()).unwrap(),
            source_block: 3,
        };
        let fixed: Vec<f64> = at.iter().flat_map(|p| bilinear_sample(&fmap, *p).unwrap()).collect();
        let tape2 = Tape::new();
        let f2 = tape2.param(values);
        let term = PointTerm { index: 0, weight: 1.0, moved, reference: Reference::Fixed(fixed) };
        let constant = displacement_term(&tape2, f2, (c, h, w), &[term]).unwrap();
        let g_constant = tape2.backward(constant.total).wrt(f2).unwrap().to_vec();

        assert_eq!(tape.scalar(detached.total), tape2.scalar(constant.total));
        assert_eq!(g_detached, g_constant);
    }
}

pub fn motion_supervision_never_differentiates_the_text() {
    // The latent gradient is unchanged when the text rows carry no gradient
    // path at all, and the text update leaves the latent untouched.
    for method in Method::ALL {
        let case = Case::method(3, 10, method);
        let mut drag = case.drag();
        drag.step().unwrap();
        let latent_before = drag.state().latent.clone();
        let text_before = drag.state().text.clone();
        drag.text_update().unwrap();
        assert_eq!(drag.state().latent, latent_before, "{method}");
        assert_ne!(drag.state().text, text_before, "{method}");
        let bottleneck_before = drag.state().bottleneck.clone();
        let text_before = drag.state().text.clone();
        drag.latent_update().unwrap();
        assert_eq!(drag.state().text, text_before, "{method}");
        if method == Method::DragNoise {
            assert_ne!(drag.state().bottleneck, bottleneck_before);
        }
    }
}

pub fn text_regulariser_anchor_is_the_original_embedding() {
    let case = Case::method(5, 10, Method::DragDiffusion);
    let mut drag = case.drag();
    for _ in 0..4 {
        drag.step().unwrap();
    }
    let original = drag.state().cached().text().clone();
    assert_eq!(&original, &case.text);
    let loss = drag.text_optimization_loss().unwrap();
    let expected = drag.config().lambda_text * drag.state().text.masked_l1_to(&original);
    assert!((loss.regularization - expected).abs() < 1e-12);
}

pub fn cached_original_is_frozen_across_iterations() {
    let case = Case::method(1, 10, Method::DragDiffusion);
    let mut drag = case.drag();
    let cached = drag.state().cached().clone();
    for k in 0..5 {
        assert_eq!(drag.state().k, k);
        drag.step().unwrap();
    }
    let after = drag.state().cached();
    assert_eq!(after.latent(), cached.latent());
    assert_eq!(after.text(), cached.text());
    assert_eq!(after.features(), cached.features());
    assert_eq!(after.denoised(), cached.denoised());
}

common::harness_tests!(
    detach_produces_an_untracked_leaf,
    detached_reference_gradient_equals_constant_reference_gradient,
    motion_supervision_never_differentiates_the_text,
    text_regulariser_anchor_is_the_original_embedding,
    cached_original_is_frozen_across_iterations,
);
