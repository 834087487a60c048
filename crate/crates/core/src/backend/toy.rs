//! Deterministic toy diffusion model.
//!
//! Latents are `4 x H x W` at the image resolution (downsampling factor 1);
//! the encoder is an injective per-pixel affine map so decode inverts it
//! exactly. The text encoder is a whitespace tokenizer with hashed word
//! vectors.
//!
//! The "U-Net" keeps a 16-channel residual stream per position. Its first
//! four channels start as the scaled latent `z / sqrt(abar_t)` (a clean-latent
//! estimate); the rest are a tanh of a 3x3 patch mix of the latent plus a
//! time embedding. Four decoder blocks each add a single-head attention read
//! of the text and a small tanh MLP (block 3 mixes 3x3 neighbourhoods). The
//! attention queries are fixed smooth positional codes, so each token writes
//! into its own soft spatial region and the text carries part of the layout. The
//! clean-latent estimate is read back from the first four channels and the
//! noise prediction is `eps = z - sqrt(abar_t) * x0_hat`, so every block's
//! features, and the text through attention, shape what denoising produces.
//! All weights are drawn once from the seed and frozen.

use std::sync::Arc;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{BackendInfo, DiffusionBackend, GridDims, NoiseSchedule};
use crate::autodiff::{Gather, Tape, Var};
use crate::domain::{ImageTensor, LatentState, TextEmbedding, TOKEN_ROWS};
use crate::error::{DragError, Result};

const LATENT_CHANNELS: usize = 4;
const EMBED_DIM: usize = 8;
const HIDDEN: usize = 16;
const FEATURE_CHANNELS: usize = HIDDEN;
const ATTN_DIM: usize = 8;
const NUM_STEPS: usize = 50;
const FINAL_ALPHA: f64 = 0.02;
const TIME_FREQS: usize = 4;
/// Index of the one decoder block that mixes 3x3 neighbourhoods.
const SPATIAL_BLOCK: usize = 2;
/// Leading stream channels that carry the clean-latent estimate.
const CONTENT: usize = LATENT_CHANNELS;
/// Scale of each block's MLP update to the stream.
const MLP_GAIN: f64 = 0.3;
/// Gain of the attention value projection.
const ATTENTION_GAIN: f64 = 0.6;
/// Amplitude of the positional attention queries.
const SPATIAL_QUERY_SCALE: f64 = 2.0;

#[derive(Debug, Clone)]
struct Dense {
    weight: Vec<f64>,
    inputs: usize,
    outputs: usize,
}

impl Dense {
    fn random(rng: &mut ChaCha8Rng, inputs: usize, outputs: usize, gain: f64) -> Self {
        let scale = gain / (inputs as f64).sqrt();
        let weight = (0..inputs * outputs)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self {
            weight,
            inputs,
            outputs,
        }
    }

    fn apply(&self, tape: &Tape, x: Var, rows: usize) -> Var {
        let w = tape.constant(self.weight.clone());
        tape.matmul(x, w, rows, self.inputs, self.outputs)
    }
}

#[derive(Debug, Clone)]
struct Attention {
    /// Per query dimension: row frequency, column frequency, phase.
    spatial: Vec<(f64, f64, f64)>,
    key: Dense,
    value: Dense,
}

impl Attention {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        Self {
            spatial: (0..ATTN_DIM)
                .map(|_| {
                    let sign = |rng: &mut ChaCha8Rng| if rng.random::<bool>() { 1.0 } else { -1.0 };
                    (
                        sign(rng) * rng.random_range(0.2..0.9),
                        sign(rng) * rng.random_range(0.2..0.9),
                        rng.random::<f64>() * std::f64::consts::TAU,
                    )
                })
                .collect(),
            key: Dense::random(rng, EMBED_DIM, ATTN_DIM, 1.5),
            value: Dense::random(rng, EMBED_DIM, HIDDEN, ATTENTION_GAIN),
        }
    }

    /// Smooth positional queries, `rows x ATTN_DIM`.
    fn spatial_queries(&self, dims: GridDims) -> Vec<f64> {
        let mut out = Vec::with_capacity(dims.area() * ATTN_DIM);
        for r in 0..dims.height {
            for c in 0..dims.width {
                for (fr, fc, phase) in &self.spatial {
                    out.push(SPATIAL_QUERY_SCALE * (fr * r as f64 + fc * c as f64 + phase).sin());
                }
            }
        }
        out
    }

    /// Position-major `rows x HIDDEN` read of the text matrix.
    fn read(&self, tape: &Tape, dims: GridDims, text: Var) -> Var {
        let rows = dims.area();
        let q = tape.constant(self.spatial_queries(dims));
        let k = self.key.apply(tape, text, TOKEN_ROWS);
        let v = self.value.apply(tape, text, TOKEN_ROWS);
        let scores = tape.matmul_t(q, k, rows, ATTN_DIM, TOKEN_ROWS);
        let scores = tape.scale(scores, 1.0 / (ATTN_DIM as f64).sqrt());
        let probs = tape.softmax_rows(scores, TOKEN_ROWS);
        tape.matmul(probs, v, rows, TOKEN_ROWS, HIDDEN)
    }
}

#[derive(Debug, Clone)]
struct FeatureBlock {
    attention: Attention,
    mix: Dense,
    bias: Vec<f64>,
}

/// The toy backend. Cheap to clone; all state is immutable.
#[derive(Debug, Clone)]
pub struct ToyBackend {
    info: BackendInfo,
    seed: u64,
    color: [[f64; 3]; LATENT_CHANNELS],
    color_bias: [f64; LATENT_CHANNELS],
    color_pinv: [[f64; LATENT_CHANNELS]; 3],
    special_tokens: [Vec<f64>; 3],
    positional: Vec<f64>,
    encoder: Dense,
    encoder_bias: Vec<f64>,
    time_freqs: Vec<(f64, f64)>,
    time_proj: Vec<f64>,
    blocks: Vec<FeatureBlock>,
}

impl ToyBackend {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x746f_795f_6261_636b);
        let normal = |rng: &mut ChaCha8Rng| rng.sample::<f64, _>(StandardNormal);

        // Random perturbation of a fixed well-conditioned colour basis keeps
        // the map injective for every seed.
        let base = [
            [0.6, 0.6, 0.6],
            [0.8, -0.4, -0.4],
            [0.0, 0.7, -0.7],
            [0.3, -0.3, 0.3],
        ];
        let mut color = base;
        for row in color.iter_mut() {
            for v in row.iter_mut() {
                *v += 0.1 * normal(&mut rng);
            }
        }
        let color_bias = std::array::from_fn(|_| 0.1 * normal(&mut rng));
        let color_pinv = pseudo_inverse(&color);

        let token = |rng: &mut ChaCha8Rng| (0..EMBED_DIM).map(|_| normal(rng)).collect::<Vec<_>>();
        let special_tokens = [token(&mut rng), token(&mut rng), token(&mut rng)];
        let positional = (0..TOKEN_ROWS * EMBED_DIM).map(|_| 0.1 * normal(&mut rng)).collect();

        let encoder = Dense::random(&mut rng, 9 * LATENT_CHANNELS, HIDDEN - CONTENT, 1.0);
        let encoder_bias = (0..HIDDEN - CONTENT).map(|_| 0.1 * normal(&mut rng)).collect();
        let time_freqs = (0..TIME_FREQS)
            .map(|i| ((i + 1) as f64 * 1.7, rng.random::<f64>() * std::f64::consts::TAU))
            .collect();
        let time_proj = (0..2 * TIME_FREQS * (HIDDEN - CONTENT)).map(|_| 0.15 * normal(&mut rng)).collect();


        let blocks = (0..4)
            .map(|i| FeatureBlock {
                attention: Attention::random(&mut rng),
                mix: if i == SPATIAL_BLOCK {
                    Dense::random(&mut rng, 9 * HIDDEN, HIDDEN, 1.5)
                } else {
                    Dense::random(&mut rng, HIDDEN, HIDDEN, 1.5)
                },
                bias: (0..HIDDEN).map(|_| 0.1 * normal(&mut rng)).collect(),
            })
            .collect();

        Self {
            info: BackendInfo {
                name: "toy".into(),
                latent_downsample_factor: 1,
                latent_channels: LATENT_CHANNELS,
                embed_dim: EMBED_DIM,
                schedule: NoiseSchedule::linear(NUM_STEPS, FINAL_ALPHA),
            },
            seed,
            color,
            color_bias,
            color_pinv,
            special_tokens,
            positional,
            encoder,
            encoder_bias,
            time_freqs,
            time_proj,
            blocks,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Image decoded from an all-zero latent.
    pub fn base_color(&self) -> [f64; 3] {
        let mut out = [0.0; 3];
        for (ch, o) in out.iter_mut().enumerate() {
            let v: f64 = (0..LATENT_CHANNELS)
                .map(|k| self.color_pinv[ch][k] * -self.color_bias[k])
                .sum();
            *o = (v + 1.0) / 2.0;
        }
        out
    }

    /// Decodes without clamping to `[0, 1]`.
    pub fn decode_raw(&self, latent: &LatentState) -> Array3<f64> {
        let (_, h, w) = latent.dims();
        let z = &latent.values;
        Array3::from_shape_fn((3, h, w), |(ch, y, x)| {
            let v: f64 = (0..LATENT_CHANNELS)
                .map(|k| self.color_pinv[ch][k] * (z[[k, y, x]] - self.color_bias[k]))
                .sum();
            (v + 1.0) / 2.0
        })
    }

    fn word_vector(&self, word: &str) -> Vec<f64> {
        // FNV-1a keeps word vectors stable across runs and platforms.
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        for b in word.as_bytes() {
            hash ^= u64::from(*b);
            hash = hash.wrapping_mul(0x0100_0000_01b3);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(hash ^ self.seed.rotate_left(17));
        (0..EMBED_DIM).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
    }

    fn time_bias(&self, t: usize) -> Vec<f64> {
        let phase = t as f64 / NUM_STEPS as f64;
        let feats: Vec<f64> = self
            .time_freqs
            .iter()
            .flat_map(|(f, p)| [(f * phase + p).sin(), (f * phase + p).cos()])
            .collect();
        let width = HIDDEN - CONTENT;
        (0..width)
            .map(|j| {
                self.encoder_bias[j]
                    + feats
                        .iter()
                        .enumerate()
                        .map(|(i, v)| v * self.time_proj[i * width + j])
                        .sum::<f64>()
            })
            .collect()
    }

    /// Position-major `HW x HIDDEN` bottleneck stream.
    fn encoder_on_tape(&self, tape: &Tape, latent: Var, dims: GridDims, t: usize) -> Var {
        let rows = dims.area();
        let width = HIDDEN - CONTENT;
        let patches = tape.gather(latent, Arc::new(patch_gather(dims, LATENT_CHANNELS, Layout::ChannelMajor)));
        let pre = self.encoder.apply(tape, patches, rows);
        let bias = tape.constant(self.time_bias(t));
        let pre = tape.add_row_bias(pre, bias, width);
        let hidden = tape.tanh(pre);
        let scale = 1.0 / self.info.schedule.alpha_bar(t).sqrt();
        let content = tape.gather(latent, Arc::new(place_columns(rows, CONTENT, true, 0, scale)));
        let rest = tape.gather(hidden, Arc::new(place_columns(rows, width, false, CONTENT, 1.0)));
        tape.add(content, rest)
    }

    /// Runs the decoder chain from the bottleneck through `last` blocks and
    /// returns the stream after the last one (position-major `HW x HIDDEN`).
    fn decoder(&self, tape: &Tape, hidden: Var, dims: GridDims, text: Var, last: u8) -> Var {
        let rows = dims.area();
        let mut u = hidden;
        for (i, b) in self.blocks.iter().take(usize::from(last)).enumerate() {
            let read = b.attention.read(tape, dims, text);
            u = tape.add(u, read);
            let pre = if i == SPATIAL_BLOCK {
                let patches = tape.gather(u, Arc::new(patch_gather(dims, HIDDEN, Layout::PositionMajor)));
                b.mix.apply(tape, patches, rows)
            } else {
                b.mix.apply(tape, u, rows)
            };
            let bias = tape.constant(b.bias.clone());
            let pre = tape.add_row_bias(pre, bias, HIDDEN);
            let update = tape.tanh(pre);
            let update = tape.scale(update, MLP_GAIN);
            u = tape.add(u, update);
        }
        u
    }

    /// `eps = z - sqrt(abar_t) * x0_hat`. The clean-latent estimate moves
    /// from `z / sqrt(abar_t)` towards the stream's content channels by
    /// `sqrt(1 - abar_t)`, so the network's correction fades as `t -> 0`.
    fn noise_head(&self, tape: &Tape, hidden: Var, latent: Var, dims: GridDims, t: usize, text: Var) -> Var {
        let abar = self.info.schedule.alpha_bar(t);
        let top = self.decoder(tape, hidden, dims, text, 4);
        let read = tape.gather(top, Arc::new(content_channels(dims.area())));
        // sqrt(abar) * (x0_net - z / sqrt(abar)) is the stream's correction.
        let correction = tape.sub(tape.scale(read, abar.sqrt()), latent);
        tape.scale(correction, -(1.0 - abar).sqrt())
    }

    fn feature_block(&self, tape: &Tape, hidden: Var, dims: GridDims, text: Var, block: u8) -> Var {
        let f = self.decoder(tape, hidden, dims, text, block);
        tape.gather(f, Arc::new(Gather::transpose(dims.area(), FEATURE_CHANNELS)))
    }

    fn check_len(&self, tape: &Tape, v: Var, expected: usize, what: &str) -> Result<()> {
        let got = tape.len_of(v);
        if got != expected {
            return Err(DragError::Shape(format!("{what} has {got} values, expected {expected}")));
        }
        Ok(())
    }

    fn check_inputs(&self, tape: &Tape, latent: Var, dims: GridDims, text: Var) -> Result<()> {
        self.check_len(tape, latent, LATENT_CHANNELS * dims.area(), "latent")?;
        self.check_len(tape, text, TOKEN_ROWS * EMBED_DIM, "text embedding")
    }
}

#[derive(Clone, Copy)]
enum Layout {
    /// `C x H x W`
    ChannelMajor,
    /// `(H * W) x C`
    PositionMajor,
}

/// Extracts replicate-padded 3x3 patches into a `(H * W) x (9 * C)` matrix.
fn patch_gather(dims: GridDims, channels: usize, layout: Layout) -> Gather {
    let (h, w) = (dims.height as isize, dims.width as isize);
    let mut g = Gather::new(channels * dims.area());
    for y in 0..h {
        for x in 0..w {
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let yy = (y + dy).clamp(0, h - 1) as usize;
                    let xx = (x + dx).clamp(0, w - 1) as usize;
                    for c in 0..channels {
                        let idx = match layout {
                            Layout::ChannelMajor => c * dims.area() + yy * dims.width + xx,
                            Layout::PositionMajor => (yy * dims.width + xx) * channels + c,
                        };
                        g.push_row([(idx, 1.0)]);
                    }
                }
            }
        }
    }
    g
}

/// Writes a `cols`-wide source (channel-major when `channel_major`, else
/// position-major) into columns `offset..offset + cols` of a position-major
/// `rows x HIDDEN` matrix, scaled by `weight`. Other columns are zero.
fn place_columns(rows: usize, cols: usize, channel_major: bool, offset: usize, weight: f64) -> Gather {
    let mut g = Gather::new(rows * cols);
    for r in 0..rows {
        for j in 0..HIDDEN {
            if (offset..offset + cols).contains(&j) {
                let c = j - offset;
                let idx = if channel_major { c * rows + r } else { r * cols + c };
                g.push_row([(idx, weight)]);
            } else {
                g.push_row([]);
            }
        }
    }
    g
}

/// Channel-major `CONTENT x rows` view of the stream's content channels.
fn content_channels(rows: usize) -> Gather {
    let mut g = Gather::new(rows * HIDDEN);
    for c in 0..CONTENT {
        for r in 0..rows {
            g.push_row([(r * HIDDEN + c, 1.0)]);
        }
    }
    g
}

/// Moore-Penrose pseudo-inverse of a full-column-rank 4x3 matrix.
fn pseudo_inverse(a: &[[f64; 3]; LATENT_CHANNELS]) -> [[f64; LATENT_CHANNELS]; 3] {
    let mut ata = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            ata[i][j] = (0..LATENT_CHANNELS).map(|k| a[k][i] * a[k][j]).sum();
        }
    }
    let inv = invert3(&ata);
    let mut out = [[0.0; LATENT_CHANNELS]; 3];
    for i in 0..3 {
        for k in 0..LATENT_CHANNELS {
            out[i][k] = (0..3).map(|j| inv[i][j] * a[k][j]).sum();
        }
    }
    out
}

fn invert3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    assert!(det.abs() > 1e-9, "colour basis is singular");
    let c = |r0: usize, c0: usize, r1: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
    [
        [c(1, 1, 2, 2) / det, -c(0, 1, 2, 2) / det, c(0, 1, 1, 2) / det],
        [-c(1, 0, 2, 2) / det, c(0, 0, 2, 2) / det, -c(0, 0, 1, 2) / det],
        [c(1, 0, 2, 1) / det, -c(0, 0, 2, 1) / det, c(0, 0, 1, 1) / det],
    ]
}

impl DiffusionBackend for ToyBackend {
    fn info(&self) -> &BackendInfo {
        &self.info
    }

    fn encode(&self, image: &ImageTensor) -> Result<LatentState> {
        let x = image.data();
        let (_, h, w) = x.dim();
        let values = Array3::from_shape_fn((LATENT_CHANNELS, h, w), |(k, y, xx)| {
            self.color_bias[k]
                + (0..3)
                    .map(|ch| self.color[k][ch] * (2.0 * x[[ch, y, xx]] - 1.0))
                    .sum::<f64>()
        });
        LatentState::new(values, 0)
    }

    fn decode(&self, latent: &LatentState) -> Result<ImageTensor> {
        if latent.timestep != 0 {
            return Err(DragError::Timestep(format!(
                "decode expects timestep 0, got {}",
                latent.timestep
            )));
        }
        ImageTensor::from_unclamped(self.decode_raw(latent))
    }

    fn encode_text(&self, prompt: &str) -> TextEmbedding {
        let words: Vec<String> = prompt
            .split_whitespace()
            .map(str::to_lowercase)
            .take(TOKEN_ROWS - 2)
            .collect();
        let [bos, eos, pad] = &self.special_tokens;
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(TOKEN_ROWS);
        rows.push(bos.clone());
        rows.extend(words.iter().map(|w| self.word_vector(w)));
        rows.push(eos.clone());
        while rows.len() < TOKEN_ROWS {
            rows.push(pad.clone());
        }
        let values = Array2::from_shape_fn((TOKEN_ROWS, EMBED_DIM), |(r, j)| {
            rows[r][j] + self.positional[r * EMBED_DIM + j]
        });
        TextEmbedding::new(values, 1 + words.len()).expect("toy text embedding is valid")
    }

    fn feature_channels(&self, _block: u8) -> usize {
        FEATURE_CHANNELS
    }

    fn noise_on_tape(&self, tape: &Tape, latent: Var, dims: GridDims, t: usize, text: Var) -> Result<Var> {
        self.check_inputs(tape, latent, dims, text)?;
        let hidden = self.encoder_on_tape(tape, latent, dims, t);
        Ok(self.noise_head(tape, hidden, latent, dims, t, text))
    }

    fn features_on_tape(
        &self,
        tape: &Tape,
        latent: Var,
        dims: GridDims,
        t: usize,
        text: Var,
        block: u8,
    ) -> Result<Var> {
        if !(1..=4).contains(&block) {
            return Err(DragError::BadBlock(block));
        }
        self.check_inputs(tape, latent, dims, text)?;
        let hidden = self.encoder_on_tape(tape, latent, dims, t);
        Ok(self.feature_block(tape, hidden, dims, text, block))
    }

    fn bottleneck_channels(&self) -> Option<usize> {
        Some(HIDDEN)
    }

    fn bottleneck_on_tape(&self, tape: &Tape, latent: Var, dims: GridDims, t: usize, text: Var) -> Result<Var> {
        self.check_inputs(tape, latent, dims, text)?;
        let hidden = self.encoder_on_tape(tape, latent, dims, t);
        Ok(tape.gather(hidden, Arc::new(Gather::transpose(dims.area(), HIDDEN))))
    }

    fn features_from_bottleneck(
        &self,
        tape: &Tape,
        bottleneck: Var,
        dims: GridDims,
        text: Var,
        block: u8,
    ) -> Result<Var> {
        if !(1..=4).contains(&block) {
            return Err(DragError::BadBlock(block));
        }
        self.check_len(tape, bottleneck, HIDDEN * dims.area(), "bottleneck")?;
        self.check_len(tape, text, TOKEN_ROWS * EMBED_DIM, "text embedding")?;
        let hidden = tape.gather(bottleneck, Arc::new(Gather::transpose(HIDDEN, dims.area())));
        Ok(self.feature_block(tape, hidden, dims, text, block))
    }

    fn noise_from_bottleneck(
        &self,
        tape: &Tape,
        bottleneck: Var,
        latent: Var,
        dims: GridDims,
        t: usize,
        text: Var,
    ) -> Result<Var> {
        self.check_len(tape, bottleneck, HIDDEN * dims.area(), "bottleneck")?;
        self.check_inputs(tape, latent, dims, text)?;
        let hidden = tape.gather(bottleneck, Arc::new(Gather::transpose(HIDDEN, dims.area())));
        Ok(self.noise_head(tape, hidden, latent, dims, t, text))
    }
}
