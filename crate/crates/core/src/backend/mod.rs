//! Diffusion backend contract and the DDIM machinery built on top of it.
//!
//! A backend supplies encode/decode, a text encoder and three differentiable
//! networks recorded on a [`Tape`]: noise prediction, decoder feature maps and
//! (optionally) a bottleneck that can be injected back. Everything else here
//! (DDIM stepping, inversion, full denoising) is generic over the trait.

mod toy;

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::Array3;

use crate::autodiff::{Tape, Var};
use crate::domain::{FeatureMap, ImageTensor, LatentState, TextEmbedding};
use crate::error::{DragError, Result};

pub use toy::ToyBackend;

/// Cumulative signal coefficients `alpha_bar[t]` for `t = 0..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// `alpha_bar` falling linearly from 1 at `t = 0` to `final_alpha` at `t = T`.
    pub fn linear(num_steps: usize, final_alpha: f64) -> Self {
        assert!(num_steps > 0 && final_alpha > 0.0 && final_alpha < 1.0);
        let alpha_bar = (0..=num_steps)
            .map(|t| 1.0 - (1.0 - final_alpha) * t as f64 / num_steps as f64)
            .collect();
        Self { alpha_bar }
    }

    /// Number of diffusion timesteps `T`.
    pub fn num_steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// Coefficients `(a, b)` of the deterministic DDIM move from timestep
    /// `from` to `to`: `z_to = a * z_from + b * eps`.
    pub fn ddim_coefficients(&self, from: usize, to: usize) -> (f64, f64) {
        let (af, at) = (self.alpha_bar[from], self.alpha_bar[to]);
        let ratio = (at / af).sqrt();
        (ratio, (1.0 - at).sqrt() - ratio * (1.0 - af).sqrt())
    }
}

/// Static facts about a backend.
#[derive(Debug, Clone)]
pub struct BackendInfo {
    pub name: String,
    pub latent_downsample_factor: usize,
    pub latent_channels: usize,
    pub embed_dim: usize,
    pub schedule: NoiseSchedule,
}

/// Spatial size of a latent grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridDims {
    pub height: usize,
    pub width: usize,
}

impl GridDims {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width }
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }
}

/// Contract every diffusion backend implements.
///
/// Tape-level methods take latents in `C x H x W` layout and text as a
/// `77 x d` row-major matrix, and return `C x H x W` outputs.
pub trait DiffusionBackend: Send + Sync {
    fn info(&self) -> &BackendInfo;

    fn encode(&self, image: &ImageTensor) -> Result<LatentState>;

    /// Inverse of [`encode`](Self::encode); expects a clean latent.
    fn decode(&self, latent: &LatentState) -> Result<ImageTensor>;

    fn encode_text(&self, prompt: &str) -> TextEmbedding;

    fn feature_channels(&self, block: u8) -> usize;

    fn noise_on_tape(&self, tape: &Tape, latent: Var, dims: GridDims, t: usize, text: Var) -> Result<Var>;

    fn features_on_tape(
        &self,
        tape: &Tape,
        latent: Var,
        dims: GridDims,
        t: usize,
        text: Var,
        block: u8,
    ) -> Result<Var>;

    /// Channels of the injectable bottleneck, if the backend has one.
    fn bottleneck_channels(&self) -> Option<usize> {
        None
    }

    fn bottleneck_on_tape(&self, _tape: &Tape, _latent: Var, _dims: GridDims, _t: usize, _text: Var) -> Result<Var> {
        Err(DragError::BackendCapability("bottleneck injection".into()))
    }

    fn features_from_bottleneck(
        &self,
        _tape: &Tape,
        _bottleneck: Var,
        _dims: GridDims,
        _text: Var,
        _block: u8,
    ) -> Result<Var> {
        Err(DragError::BackendCapability("bottleneck injection".into()))
    }

    /// Noise prediction with an injected bottleneck. `latent` feeds the
    /// skip path around the bottleneck.
    fn noise_from_bottleneck(
        &self,
        _tape: &Tape,
        _bottleneck: Var,
        _latent: Var,
        _dims: GridDims,
        _t: usize,
        _text: Var,
    ) -> Result<Var> {
        Err(DragError::BackendCapability("bottleneck injection".into()))
    }
}

/// Hook for backends that fine-tune per image before dragging (LoRA).
/// The toy backend never needs it.
pub trait FineTuneHook: Send + Sync {
    fn fine_tune(&self, image: &ImageTensor, prompt: &str) -> Result<()>;
}

fn check_timestep(backend: &dyn DiffusionBackend, t: usize) -> Result<()> {
    let max = backend.info().schedule.num_steps();
    if t == 0 || t > max {
        return Err(DragError::Timestep(format!("timestep {t} not in 1..={max}")));
    }
    Ok(())
}

fn check_block(block: u8) -> Result<()> {
    if (1..=4).contains(&block) {
        Ok(())
    } else {
        Err(DragError::BadBlock(block))
    }
}

fn dims_of(latent: &LatentState) -> GridDims {
    let (_, h, w) = latent.dims();
    GridDims::new(h, w)
}

/// One DDIM denoising step recorded on a tape.
pub fn denoise_step_on_tape(
    backend: &dyn DiffusionBackend,
    tape: &Tape,
    latent: Var,
    dims: GridDims,
    t: usize,
    text: Var,
) -> Result<Var> {
    check_timestep(backend, t)?;
    let eps = backend.noise_on_tape(tape, latent, dims, t, text)?;
    let (a, b) = backend.info().schedule.ddim_coefficients(t, t - 1);
    let za = tape.scale(latent, a);
    let eb = tape.scale(eps, b);
    Ok(tape.add(za, eb))
}

/// One DDIM denoising step whose noise prediction reads an injected bottleneck.
pub fn denoise_step_with_bottleneck(
    backend: &dyn DiffusionBackend,
    tape: &Tape,
    latent: Var,
    bottleneck: Var,
    dims: GridDims,
    t: usize,
    text: Var,
) -> Result<Var> {
    check_timestep(backend, t)?;
    let eps = backend.noise_from_bottleneck(tape, bottleneck, latent, dims, t, text)?;
    let (a, b) = backend.info().schedule.ddim_coefficients(t, t - 1);
    let za = tape.scale(latent, a);
    let eb = tape.scale(eps, b);
    Ok(tape.add(za, eb))
}

pub fn predict_noise(
    backend: &dyn DiffusionBackend,
    latent: &LatentState,
    t: usize,
    text: &TextEmbedding,
) -> Result<Array3<f64>> {
    check_timestep(backend, t)?;
    let tape = Tape::new();
    let z = tape.constant(latent.as_slice().to_vec());
    let c = tape.constant(text.as_slice().to_vec());
    let eps = backend.noise_on_tape(&tape, z, dims_of(latent), t, c)?;
    Ok(Array3::from_shape_vec(latent.dims(), tape.value(eps)).expect("noise shape"))
}

/// One deterministic DDIM step from `latent.timestep` to `latent.timestep - 1`.
pub fn ddim_denoise_step(
    backend: &dyn DiffusionBackend,
    latent: &LatentState,
    text: &TextEmbedding,
) -> Result<LatentState> {
    let t = latent.timestep;
    if t == 0 {
        return Err(DragError::Timestep("cannot denoise a clean latent".into()));
    }
    let tape = Tape::new();
    let z = tape.constant(latent.as_slice().to_vec());
    let c = tape.constant(text.as_slice().to_vec());
    let out = denoise_step_on_tape(backend, &tape, z, dims_of(latent), t, c)?;
    let mut next = latent.with_values(tape.value(out));
    next.timestep = t - 1;
    Ok(next)
}

/// Denoises all the way to timestep 0.
pub fn ddim_denoise(
    backend: &dyn DiffusionBackend,
    latent: &LatentState,
    text: &TextEmbedding,
) -> Result<LatentState> {
    let mut cur = latent.clone();
    while cur.timestep > 0 {
        cur = ddim_denoise_step(backend, &cur, text)?;
    }
    Ok(cur)
}

/// DDIM inversion of a clean latent, returning every intermediate latent
/// (`trajectory[k]` sits at timestep `k`).
pub fn ddim_invert_trajectory(
    backend: &dyn DiffusionBackend,
    latent: &LatentState,
    text: &TextEmbedding,
    steps: usize,
) -> Result<Vec<LatentState>> {
    if latent.timestep != 0 {
        return Err(DragError::Timestep("inversion starts from a clean latent".into()));
    }
    let max = backend.info().schedule.num_steps();
    if steps > max {
        return Err(DragError::Timestep(format!("{steps} inversion steps exceed T = {max}")));
    }
    let dims = dims_of(latent);
    let mut traj = vec![latent.clone()];
    for t in 1..=steps {
        let prev = &traj[t - 1];
        let tape = Tape::new();
        let z = tape.constant(prev.as_slice().to_vec());
        let c = tape.constant(text.as_slice().to_vec());
        let eps = backend.noise_on_tape(&tape, z, dims, t, c)?;
        let (a, b) = backend.info().schedule.ddim_coefficients(t - 1, t);
        let za = tape.scale(z, a);
        let eb = tape.scale(eps, b);
        let next = tape.add(za, eb);
        let mut state = prev.with_values(tape.value(next));
        state.timestep = t;
        traj.push(state);
    }
    Ok(traj)
}

pub fn ddim_invert(
    backend: &dyn DiffusionBackend,
    latent: &LatentState,
    text: &TextEmbedding,
    steps: usize,
) -> Result<LatentState> {
    let mut traj = ddim_invert_trajectory(backend, latent, text, steps)?;
    Ok(traj.pop().expect("trajectory holds the start latent"))
}

pub fn feature_map(
    backend: &dyn DiffusionBackend,
    latent: &LatentState,
    t: usize,
    text: &TextEmbedding,
    block: u8,
) -> Result<FeatureMap> {
    check_block(block)?;
    let tape = Tape::new();
    let z = tape.constant(latent.as_slice().to_vec());
    let c = tape.constant(text.as_slice().to_vec());
    let dims = dims_of(latent);
    let f = backend.features_on_tape(&tape, z, dims, t, c, block)?;
    let channels = backend.feature_channels(block);
    Ok(FeatureMap {
        values: Array3::from_shape_vec((channels, dims.height, dims.width), tape.value(f))
            .expect("feature shape"),
        source_block: block,
    })
}

/// Bottleneck activation `C_s x H x W`.
pub fn bottleneck_feature(
    backend: &dyn DiffusionBackend,
    latent: &LatentState,
    t: usize,
    text: &TextEmbedding,
) -> Result<Array3<f64>> {
    let channels = backend
        .bottleneck_channels()
        .ok_or_else(|| DragError::BackendCapability("bottleneck injection".into()))?;
    let tape = Tape::new();
    let z = tape.constant(latent.as_slice().to_vec());
    let c = tape.constant(text.as_slice().to_vec());
    let dims = dims_of(latent);
    let s = backend.bottleneck_on_tape(&tape, z, dims, t, c)?;
    Ok(Array3::from_shape_vec((channels, dims.height, dims.width), tape.value(s)).expect("bottleneck shape"))
}

/// Feature map evaluated from an injected bottleneck.
pub fn feature_map_from_bottleneck(
    backend: &dyn DiffusionBackend,
    bottleneck: &Array3<f64>,
    text: &TextEmbedding,
    block: u8,
) -> Result<FeatureMap> {
    check_block(block)?;
    let (_, h, w) = bottleneck.dim();
    let dims = GridDims::new(h, w);
    let tape = Tape::new();
    let s = tape.constant(bottleneck.iter().copied().collect());
    let c = tape.constant(text.as_slice().to_vec());
    let f = backend.features_from_bottleneck(&tape, s, dims, c, block)?;
    Ok(FeatureMap {
        values: Array3::from_shape_vec((backend.feature_channels(block), h, w), tape.value(f))
            .expect("feature shape"),
        source_block: block,
    })
}

/// Which backend to construct: `"toy"` or `"adapter:<name>"`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendSelection {
    Toy,
    Adapter(String),
}

impl std::str::FromStr for BackendSelection {
    type Err = DragError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(Self::Toy),
            _ => match s.strip_prefix("adapter:") {
                Some(name) if !name.is_empty() => Ok(Self::Adapter(name.to_string())),
                _ => Err(DragError::UnknownBackend(s.to_string())),
            },
        }
    }
}

impl std::fmt::Display for BackendSelection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Toy => f.write_str("toy"),
            Self::Adapter(n) => write!(f, "adapter:{n}"),
        }
    }
}

pub type AdapterFactory = fn(seed: u64) -> Result<Arc<dyn DiffusionBackend>>;

/// Named real-model adapters. Adapters are expected to use a downsampling
/// factor of 8 and `T = 1000`; none ship with this crate.
#[derive(Default, Clone)]
pub struct BackendRegistry {
    adapters: BTreeMap<String, AdapterFactory>,
}

impl BackendRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, factory: AdapterFactory) {
        self.adapters.insert(name.to_string(), factory);
    }

    pub fn build(&self, selection: &BackendSelection, seed: u64) -> Result<Arc<dyn DiffusionBackend>> {
        match selection {
            BackendSelection::Toy => Ok(Arc::new(ToyBackend::new(seed))),
            BackendSelection::Adapter(name) => match self.adapters.get(name) {
                Some(factory) => factory(seed),
                None => Err(DragError::UnknownBackend(selection.to_string())),
            },
        }
    }
}
