//! DDIM inversion and reconstruction on the toy backend.

mod common;

use common::rms;
use dragtext_core::backend::{ddim_denoise, ddim_invert, ddim_invert_trajectory, DiffusionBackend, ToyBackend};
use dragtext_core::scene::synthetic_scene;
use dragtext_core::DragError;

const PROMPTS: [&str; 2] = ["a photo of a jug and a glass", "a dog running through tall grass"];

fn reconstruction_rms(seed: u64, invert_with: &str, denoise_with: &str) -> f64 {
    let backend = ToyBackend::new(seed);
    let scene = synthetic_scene(seed, 12, 1);
    let z0 = backend.encode(&scene.image).unwrap();
    let zt = ddim_invert(&backend, &z0, &backend.encode_text(invert_with), 35).unwrap();
    let back = ddim_denoise(&backend, &zt, &backend.encode_text(denoise_with)).unwrap();
    let image = backend.decode(&back).unwrap();
    rms(image.data().as_slice().unwrap(), scene.image.data().as_slice().unwrap())
}

#[test]
fn paired_round_trip_is_accurate() {
    for seed in 0..10 {
        let err = reconstruction_rms(seed, PROMPTS[0], PROMPTS[0]);
        assert!(err < 1e-2, "seed {seed}: rms {err}");
    }
}

#[test]
fn mismatched_text_reconstructs_worse() {
    let worse = (0..20)
        .filter(|s| reconstruction_rms(*s, PROMPTS[0], PROMPTS[1]) > reconstruction_rms(*s, PROMPTS[0], PROMPTS[0]))
        .count();
    assert!(worse >= 19, "{worse}/20");
}

#[test]
fn encode_decode_is_exact_for_clean_latents() {
    let backend = ToyBackend::new(4);
    let scene = synthetic_scene(4, 10, 1);
    let z = backend.encode(&scene.image).unwrap();
    let image = backend.decode(&z).unwrap();
    assert!(rms(image.data().as_slice().unwrap(), scene.image.data().as_slice().unwrap()) < 1e-12);
}

#[test]
fn trajectory_is_indexed_by_timestep() {
    let backend = ToyBackend::new(2);
    let scene = synthetic_scene(2, 8, 1);
    let z0 = backend.encode(&scene.image).unwrap();
    let c = backend.encode_text(PROMPTS[0]);
    let traj = ddim_invert_trajectory(&backend, &z0, &c, 10).unwrap();
    assert_eq!(traj.len(), 11);
    for (t, z) in traj.iter().enumerate() {
        assert_eq!(z.timestep, t);
    }
    assert_eq!(traj[10], ddim_invert(&backend, &z0, &c, 10).unwrap());
}

#[test]
fn inversion_rejects_out_of_range_steps_and_noisy_starts() {
    let backend = ToyBackend::new(0);
    let scene = synthetic_scene(0, 8, 1);
    let z0 = backend.encode(&scene.image).unwrap();
    let c = backend.encode_text("x");
    assert!(matches!(ddim_invert(&backend, &z0, &c, 51), Err(DragError::Timestep(_))));
    let zt = ddim_invert(&backend, &z0, &c, 3).unwrap();
    assert!(matches!(ddim_invert(&backend, &zt, &c, 3), Err(DragError::Timestep(_))));
}

#[test]
fn schedule_matches_linear_alpha_bar() {
    let backend = ToyBackend::new(0);
    let s = &backend.info().schedule;
    assert_eq!(s.num_steps(), 50);
    assert_eq!(s.alpha_bar(0), 1.0);
    assert!((s.alpha_bar(50) - 0.02).abs() < 1e-15);
    // Independent linear interpolation between 1 and 0.02.
    for t in [1, 17, 35, 49] {
        let expected = 1.0 - (1.0 - 0.02) * t as f64 / 50.0;
        assert!((s.alpha_bar(t) - expected).abs() < 1e-12, "t={t}");
    }
}
