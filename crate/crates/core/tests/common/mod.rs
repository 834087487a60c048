#![allow(dead_code, unused_imports, unused_macros)]

use dragtext_core::backend::{DiffusionBackend, ToyBackend};
use dragtext_core::drag::DragLoop;
use dragtext_core::scene::synthetic_scene;
use dragtext_core::{validate_session_inputs, DragConfig, Method, SessionInputs, TextEmbedding};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub struct Case {
    pub backend: ToyBackend,
    pub inputs: SessionInputs,
    pub text: TextEmbedding,
}

impl Case {
    pub fn new(seed: u64, size: usize, config: DragConfig) -> Self {
        let backend = ToyBackend::new(seed);
        let scene = synthetic_scene(seed, size, 1 + (seed % 2) as usize);
        let text = backend.encode_text(&scene.prompt);
        let inputs = validate_session_inputs(scene.image, scene.mask, scene.points, config, 1).unwrap();
        Self { backend, inputs, text }
    }

    pub fn method(seed: u64, size: usize, method: Method) -> Self {
        Self::new(seed, size, DragConfig::for_method(method))
    }

    pub fn drag(&self) -> DragLoop<'_> {
        DragLoop::new(&self.backend, &self.inputs, &self.text).unwrap()
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Plain-loop bilinear sample of a `C x H x W` array at a real position
/// inside the grid.
pub fn sample(f: &Array3<f64>, row: f64, col: f64) -> Vec<f64> {
    let (c, h, w) = f.dim();
    let r0 = row.floor().min((h - 1) as f64);
    let c0 = col.floor().min((w - 1) as f64);
    let (fr, fc) = (row - r0, col - c0);
    let (r0, c0) = (r0 as usize, c0 as usize);
    let (r1, c1) = ((r0 + 1).min(h - 1), (c0 + 1).min(w - 1));
    (0..c)
        .map(|ch| {
            f[[ch, r0, c0]] * (1.0 - fr) * (1.0 - fc)
                + f[[ch, r0, c1]] * (1.0 - fr) * fc
                + f[[ch, r1, c0]] * fr * (1.0 - fc)
                + f[[ch, r1, c1]] * fr * fc
        })
        .collect()
}

pub fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

pub fn rms(a: &[f64], b: &[f64]) -> f64 {
    (a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64).sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn toy(seed: u64) -> Box<dyn DiffusionBackend> {
    Box::new(ToyBackend::new(seed))
}

/// Registers each listed check as a test. The checks stay plain functions so
/// the acceptance runner, which has no test harness, can call them too.
macro_rules! harness_tests {
    ($($name:ident),* $(,)?) => {
        mod harness {
            $(#[test]
            fn $name() {
                super::$name()
            })*
        }
    };
}
pub(crate) use harness_tests;
