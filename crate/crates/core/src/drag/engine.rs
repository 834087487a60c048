use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::backend::{
    self, bottleneck_feature, ddim_denoise, ddim_denoise_step, ddim_invert_trajectory, denoise_step_on_tape,
    denoise_step_with_bottleneck, feature_map, DiffusionBackend, GridDims,
};
use crate::domain::{
    DragConfig, FeatureMap, ImageTensor, LatentState, Method, Point, PointSet, SessionInputs,
    TextEmbedding,
};
use crate::drag::geometry::{clamp_to_grid, drag_direction, region_offsets};
use crate::drag::loss::{anchored_l1, displacement_term, PointTerm, Reference};
use crate::drag::tracking::track_points;
use crate::error::{DragError, Result};
use crate::optim::Adam;
use crate::variants::{
    freedrag_classify, freedrag_terms, gooddrag_denoise_after, gooddrag_terms, AdaptationClass, Template,
    TemplateFeatureSet,
};

/// One line of the trajectory log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub k: usize,
    #[serde(rename = "L_ms")]
    pub l_ms: f64,
    #[serde(rename = "L_text")]
    pub l_text: Option<f64>,
    /// `[row, col]` per handle after tracking.
    pub handles: Vec<[f64; 2]>,
    pub text_drift_l1: f64,
}

/// Receives per-iteration records and may stop a run between iterations.
pub trait DragObserver {
    /// Called after every iteration with the state it produced.
    fn on_iteration(&mut self, _record: &IterationRecord, _state: &DragState) {}

    fn cancelled(&self) -> bool {
        false
    }
}

pub struct NullObserver;

impl DragObserver for NullObserver {}

/// Values frozen at `k = 0`.
#[derive(Debug, Clone)]
pub struct CachedOriginal {
    latent: LatentState,
    text: TextEmbedding,
    features: FeatureMap,
    denoised: LatentState,
}

impl CachedOriginal {
    pub fn latent(&self) -> &LatentState {
        &self.latent
    }

    pub fn text(&self) -> &TextEmbedding {
        &self.text
    }

    pub fn features(&self) -> &FeatureMap {
        &self.features
    }

    /// One-step denoised original latent, the image-regularisation anchor.
    pub fn denoised(&self) -> &LatentState {
        &self.denoised
    }
}

/// Evolving optimisation state.
#[derive(Debug, Clone)]
pub struct DragState {
    pub latent: LatentState,
    pub text: TextEmbedding,
    pub points: PointSet,
    pub k: usize,
    /// Optimised bottleneck (DragNoise only).
    pub bottleneck: Option<Array3<f64>>,
    cached: CachedOriginal,
}

impl DragState {
    pub fn cached(&self) -> &CachedOriginal {
        &self.cached
    }
}

/// Loss value split into its two terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub displacement: f64,
    pub regularization: f64,
}

/// The two tensors that endpoint interpolation blends, at a common timestep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Endpoints {
    pub timestep: usize,
    pub original_latent: LatentState,
    pub dragged_latent: LatentState,
    pub original_text: TextEmbedding,
    pub dragged_text: TextEmbedding,
    pub original_bottleneck: Option<Array3<f64>>,
    pub dragged_bottleneck: Option<Array3<f64>>,
}

/// Result of [`run_drag`].
#[derive(Debug, Clone)]
pub struct DragOutcome {
    pub image: ImageTensor,
    pub endpoints: Endpoints,
    pub points: PointSet,
    pub log: Vec<IterationRecord>,
}

/// Denoises `latent` to timestep 0 conditioned on `text` and decodes it. A
/// bottleneck, when given, replaces the network's own for the first step.
pub fn synthesize(
    backend: &dyn DiffusionBackend,
    latent: &LatentState,
    text: &TextEmbedding,
    bottleneck: Option<&Array3<f64>>,
) -> Result<ImageTensor> {
    let mut z = latent.clone();
    if let Some(s) = bottleneck {
        if z.timestep == 0 {
            return Err(DragError::Timestep("bottleneck injection needs t >= 1".into()));
        }
        let (_, h, w) = z.dims();
        let tape = Tape::new();
        let zv = tape.constant(z.as_slice().to_vec());
        let sv = tape.constant(s.iter().copied().collect());
        let cv = tape.constant(text.as_slice().to_vec());
        let next = denoise_step_with_bottleneck(backend, &tape, zv, sv, GridDims::new(h, w), z.timestep, cv)?;
        let t = z.timestep;
        z = z.with_values(tape.value(next));
        z.timestep = t - 1;
    }
    let clean = ddim_denoise(backend, &z, text)?;
    backend.decode(&clean)
}

/// DragDiffusion displacement terms: samples one unit along `d_i` against
/// stop-gradient samples of the same map.
pub fn dragdiffusion_terms(points: &PointSet, radius: usize, tolerance: f64, height: usize, width: usize) -> Vec<PointTerm> {
    let mut out = Vec::new();
    for i in 0..points.len() {
        if !points.is_active(i) {
            continue;
        }
        let h = points.handles()[i];
        let Some((dr, dc)) = drag_direction(h, points.targets()[i], tolerance) else {
            continue;
        };
        let offsets = region_offsets(h, radius, height, width);
        let at: Vec<Point> = offsets
            .iter()
            .map(|(a, b)| Point::new(h.row + *a as f64, h.col + *b as f64))
            .collect();
        let moved = at
            .iter()
            .map(|q| clamp_to_grid(Point::new(q.row + dr, q.col + dc), height, width))
            .collect();
        out.push(PointTerm {
            index: i,
            weight: 1.0,
            moved,
            reference: Reference::Detached(at),
        });
    }
    out
}

/// Step-by-step driver of one drag session.
pub struct DragLoop<'a> {
    backend: &'a dyn DiffusionBackend,
    config: DragConfig,
    frozen_weights: Vec<f64>,
    text_weights: Vec<f64>,
    state: DragState,
    inversion: Vec<LatentState>,
    image_anchor: LatentState,
    adam_source: Adam,
    adam_text: Adam,
    freedrag: Option<TemplateFeatureSet>,
    intention: Option<TextEmbedding>,
    log: Vec<IterationRecord>,
}

impl<'a> DragLoop<'a> {
    /// Encodes and inverts the image, then caches the `k = 0` quantities.
    pub fn new(backend: &'a dyn DiffusionBackend, inputs: &SessionInputs, text: &TextEmbedding) -> Result<Self> {
        let config = inputs.config.clone();
        config.validate()?;
        let max_t = backend.info().schedule.num_steps();
        if config.timestep > max_t {
            return Err(DragError::Timestep(format!(
                "drag timestep {} exceeds backend T = {max_t}",
                config.timestep
            )));
        }
        if config.method == Method::DragNoise && backend.bottleneck_channels().is_none() {
            return Err(DragError::BackendCapability("bottleneck injection".into()));
        }
        let clean = backend.encode(&inputs.image)?;
        let (channels, h, w) = clean.dims();
        if inputs.mask.dims() != (h, w) {
            return Err(DragError::Shape(format!(
                "mask {:?} does not match latent grid {h}x{w}",
                inputs.mask.dims()
            )));
        }
        let inversion = ddim_invert_trajectory(backend, &clean, text, config.timestep)?;
        let z_t = inversion[config.timestep].clone();
        let features = feature_map(backend, &z_t, z_t.timestep, text, config.unet_block)?;
        let denoised = ddim_denoise_step(backend, &z_t, text)?;
        let bottleneck = if config.method == Method::DragNoise {
            Some(bottleneck_feature(backend, &z_t, z_t.timestep, text)?)
        } else {
            None
        };
        let cached = CachedOriginal {
            latent: z_t.clone(),
            text: text.clone(),
            features,
            denoised: denoised.clone(),
        };
        let freedrag = if config.method == Method::FreeDrag {
            Some(TemplateFeatureSet::new(&cached.features, &inputs.points, config.region_radius_ms)?)
        } else {
            None
        };
        let source_len = bottleneck.as_ref().map_or(z_t.as_slice().len(), |s| s.len());
        let (lr_source, lr_text) = config.effective_rates();
        let text_weights: Vec<f64> = text.token_mask().iter().copied().collect();
        Ok(Self {
            backend,
            frozen_weights: inputs.mask.frozen_weights(channels),
            text_weights,
            adam_source: Adam::new(source_len, lr_source),
            adam_text: Adam::new(text.as_slice().len(), lr_text),
            state: DragState {
                latent: z_t,
                text: text.clone(),
                points: inputs.points.clone(),
                k: 0,
                bottleneck,
                cached,
            },
            inversion,
            image_anchor: denoised,
            freedrag,
            intention: None,
            config,
            log: Vec::new(),
        })
    }

    /// Replaces text optimisation with a fixed schedule: the text at each
    /// iteration is the original embedding blended with `intention` by
    /// [`intention_blend_weight`](crate::embedmanip::intention_blend_weight).
    pub fn with_intention(mut self, intention: TextEmbedding) -> Result<Self> {
        if self.config.text_optimization {
            return Err(DragError::bad_config(
                "text_optimization",
                "intention blending replaces text optimisation; disable it first",
            ));
        }
        if intention.values.dim() != self.state.cached.text.values.dim() {
            return Err(DragError::ShapeMismatch(format!(
                "intention embedding {:?} vs prompt embedding {:?}",
                intention.values.dim(),
                self.state.cached.text.values.dim()
            )));
        }
        crate::embedmanip::intention_blend_weight(&self.state.points)?;
        self.intention = Some(intention);
        Ok(self)
    }

    pub fn state(&self) -> &DragState {
        &self.state
    }

    pub fn config(&self) -> &DragConfig {
        &self.config
    }

    pub fn log(&self) -> &[IterationRecord] {
        &self.log
    }

    pub fn templates(&self) -> Option<&TemplateFeatureSet> {
        self.freedrag.as_ref()
    }

    /// The DDIM inversion trajectory of the source image (`[t]` at timestep t).
    pub fn inversion(&self) -> &[LatentState] {
        &self.inversion
    }

    /// Current anchor for the image-regularisation term.
    pub fn image_anchor(&self) -> &LatentState {
        &self.image_anchor
    }

    /// Replaces the current latent values (for probing the loop from tests).
    pub fn set_latent_values(&mut self, values: Vec<f64>) {
        self.state.latent = self.state.latent.with_values(values);
    }

    pub fn set_text_values(&mut self, values: Vec<f64>) {
        self.state.text = self.state.text.with_values(values);
    }

    pub fn set_handles(&mut self, handles: &[Point]) {
        for (i, h) in handles.iter().enumerate() {
            self.state.points.set_handle(i, *h);
        }
    }

    fn grid(&self) -> GridDims {
        let (_, h, w) = self.state.latent.dims();
        GridDims::new(h, w)
    }

    fn feature_dims(&self) -> (usize, usize, usize) {
        let g = self.grid();
        (self.backend.feature_channels(self.config.unet_block), g.height, g.width)
    }

    /// Values of the tensor motion supervision optimises.
    fn source_values(&self) -> Vec<f64> {
        match &self.state.bottleneck {
            Some(s) => s.iter().copied().collect(),
            None => self.state.latent.as_slice().to_vec(),
        }
    }

    /// Feature map (and optionally the one-step-denoised latent) from a
    /// source tensor (latent, or bottleneck for DragNoise) and text.
    fn forward(&self, tape: &Tape, source: Var, text: Var, with_denoised: bool) -> Result<(Var, Option<Var>)> {
        let dims = self.grid();
        let t = self.state.latent.timestep;
        let block = self.config.unet_block;
        if self.state.bottleneck.is_some() {
            let f = self.backend.features_from_bottleneck(tape, source, dims, text, block)?;
            let prev = if with_denoised {
                let z = tape.constant(self.state.latent.as_slice().to_vec());
                Some(denoise_step_with_bottleneck(self.backend, tape, z, source, dims, t, text)?)
            } else {
                None
            };
            Ok((f, prev))
        } else {
            let f = self.backend.features_on_tape(tape, source, dims, t, text, block)?;
            let prev = if with_denoised {
                Some(denoise_step_on_tape(self.backend, tape, source, dims, t, text)?)
            } else {
                None
            };
            Ok((f, prev))
        }
    }

    /// Displacement terms for the configured method; `alphas` gates FreeDrag.
    pub fn terms(&self, alphas: Option<&[f64]>) -> Result<Vec<PointTerm>> {
        let (_, h, w) = self.feature_dims();
        let pts = &self.state.points;
        let tol = self.config.reach_tolerance;
        let r1 = self.config.region_radius_ms;
        Ok(match self.config.method {
            Method::DragDiffusion | Method::DragNoise => dragdiffusion_terms(pts, r1, tol, h, w),
            Method::GoodDrag => gooddrag_terms(pts, &self.state.cached.features, r1, tol)?,
            Method::FreeDrag => {
                let set = self.freedrag.as_ref().expect("freedrag state");
                let ones = vec![1.0; pts.len()];
                freedrag_terms(pts, set, alphas.unwrap_or(&ones), r1, tol, h, w)
            }
        })
    }

    fn motion_supervision_on_tape(&self, tape: &Tape, source: Var, text: Var) -> Result<(Var, LossBreakdown, Vec<(usize, f64)>)> {
        let terms = self.terms(None)?;
        let (features, prev) = self.forward(tape, source, text, true)?;
        let disp = displacement_term(tape, features, self.feature_dims(), &terms)?;
        let reg = anchored_l1(
            tape,
            prev.expect("requested"),
            self.image_anchor.as_slice(),
            &self.frozen_weights,
            self.config.lambda_image,
        );
        let total = tape.add(disp.total, reg);
        let breakdown = LossBreakdown {
            total: tape.scalar(total),
            displacement: tape.scalar(disp.total),
            regularization: tape.scalar(reg),
        };
        Ok((total, breakdown, disp.per_point))
    }

    fn text_loss_on_tape(&self, tape: &Tape, source: Var, text: Var) -> Result<(Var, LossBreakdown)> {
        let alphas = self.freedrag.as_ref().map(TemplateFeatureSet::alphas);
        let terms = self.terms(alphas.as_deref())?;
        let (features, _) = self.forward(tape, source, text, false)?;
        let disp = displacement_term(tape, features, self.feature_dims(), &terms)?;
        let reg = anchored_l1(
            tape,
            text,
            self.state.cached.text.as_slice(),
            &self.text_weights,
            self.config.lambda_text,
        );
        let total = tape.add(disp.total, reg);
        let breakdown = LossBreakdown {
            total: tape.scalar(total),
            displacement: tape.scalar(disp.total),
            regularization: tape.scalar(reg),
        };
        Ok((total, breakdown))
    }

    /// Motion-supervision loss at the current state.
    pub fn motion_supervision_loss(&self) -> Result<LossBreakdown> {
        let tape = Tape::new();
        let source = tape.param(self.source_values());
        let text = tape.constant(self.state.text.as_slice().to_vec());
        Ok(self.motion_supervision_on_tape(&tape, source, text)?.1)
    }

    /// Loss and its gradient with respect to the optimised source tensor.
    pub fn motion_supervision_gradient(&self) -> Result<(LossBreakdown, Vec<f64>, Vec<(usize, f64)>)> {
        let tape = Tape::new();
        let values = self.source_values();
        let len = values.len();
        let source = tape.param(values);
        let text = tape.constant(self.state.text.as_slice().to_vec());
        let (total, breakdown, per_point) = self.motion_supervision_on_tape(&tape, source, text)?;
        let grads = tape.backward(total);
        Ok((breakdown, grads.wrt_or_zeros(source, len), per_point))
    }

    /// Text-optimisation loss at the current state.
    pub fn text_optimization_loss(&self) -> Result<LossBreakdown> {
        let tape = Tape::new();
        let source = tape.constant(self.source_values());
        let text = tape.param(self.state.text.as_slice().to_vec());
        Ok(self.text_loss_on_tape(&tape, source, text)?.1)
    }

    pub fn text_gradient(&self) -> Result<(LossBreakdown, Vec<f64>)> {
        let tape = Tape::new();
        let source = tape.constant(self.source_values());
        let values = self.state.text.as_slice().to_vec();
        let len = values.len();
        let text = tape.param(values);
        let (total, breakdown) = self.text_loss_on_tape(&tape, source, text)?;
        let grads = tape.backward(total);
        Ok((breakdown, grads.wrt_or_zeros(text, len)))
    }

    fn apply_source_step(&mut self, grad: &[f64]) {
        let mut values = self.source_values();
        self.adam_source.step(&mut values, grad);
        match &mut self.state.bottleneck {
            Some(s) => {
                *s = Array3::from_shape_vec(s.dim(), values).expect("bottleneck shape");
            }
            None => self.state.latent = self.state.latent.with_values(values),
        }
    }

    /// One Adam step on the latent (or bottleneck) against the
    /// motion-supervision loss, with the text held fixed.
    pub fn latent_update(&mut self) -> Result<LossBreakdown> {
        let (loss, grad, _) = self.motion_supervision_gradient()?;
        self.apply_source_step(&grad);
        Ok(loss)
    }

    /// One Adam step on the text embedding with the latent held fixed.
    pub fn text_update(&mut self) -> Result<LossBreakdown> {
        let (loss, grad) = self.text_gradient()?;
        let mut values = self.state.text.as_slice().to_vec();
        self.adam_text.step(&mut values, &grad);
        self.state.text = self.state.text.with_values(values);
        Ok(loss)
    }

    /// Feature map at the current latent (or bottleneck) and text.
    pub fn current_features(&self) -> Result<FeatureMap> {
        match &self.state.bottleneck {
            Some(s) => backend::feature_map_from_bottleneck(self.backend, s, &self.state.text, self.config.unet_block),
            None => feature_map(
                self.backend,
                &self.state.latent,
                self.state.latent.timestep,
                &self.state.text,
                self.config.unet_block,
            ),
        }
    }

    /// Relocates active handles by nearest-neighbour search.
    pub fn point_tracking(&mut self) -> Result<()> {
        let current = self.current_features()?;
        let next = track_points(
            &current,
            &self.state.cached.features,
            &self.state.points,
            self.config.region_radius_pt,
        )?;
        self.set_handles(&next);
        Ok(())
    }

    /// Retires every point within the reach tolerance; returns whether any
    /// point is still active.
    pub fn retire_reached(&mut self) -> bool {
        let tol = self.config.reach_tolerance;
        for i in 0..self.state.points.len() {
            let pts = &self.state.points;
            if pts.is_active(i) && drag_direction(pts.handles()[i], pts.targets()[i], tol).is_none() {
                self.state.points.deactivate(i);
            }
        }
        self.state.points.any_active()
    }

    /// FreeDrag round: up to `freedrag_max_inner` motion-supervision steps,
    /// then classification of every active point.
    fn freedrag_round(&mut self) -> Result<f64> {
        let max_inner = self.config.variant.freedrag_max_inner;
        let (lo, hi) = (self.config.variant.freedrag_tau_lo_scale, self.config.variant.freedrag_tau_hi_scale);
        let mut first_loss = None;
        for _ in 0..max_inner {
            let (loss, grad, per_point) = self.motion_supervision_gradient()?;
            first_loss.get_or_insert(loss.total);
            let set = self.freedrag.as_mut().expect("freedrag state");
            for (i, l) in &per_point {
                set.initial_losses[*i].get_or_insert(*l);
            }
            let done = per_point
                .iter()
                .all(|(i, l)| *l <= lo * set.initial_losses[*i].expect("set above"));
            if done {
                break;
            }
            self.apply_source_step(&grad);
        }
        let tape = Tape::new();
        let source = tape.constant(self.source_values());
        let text = tape.constant(self.state.text.as_slice().to_vec());
        let (_, _, per_point) = self.motion_supervision_on_tape(&tape, source, text)?;
        let set = self.freedrag.as_mut().expect("freedrag state");
        for c in set.classes.iter_mut() {
            *c = None;
        }
        for (i, l) in per_point {
            let base = set.initial_losses[i].expect("recorded in the first inner step");
            set.classes[i] = Some(freedrag_classify(l, lo * base, hi * base));
        }
        Ok(first_loss.expect("max_inner >= 1"))
    }

    /// FreeDrag point update: move one unit along `d` unless poorly learned,
    /// in which case revert to the previous position and keep the template.
    fn freedrag_move(&mut self) -> Result<()> {
        let tol = self.config.reach_tolerance;
        let radius = self.config.region_radius_ms;
        let current = self.current_features()?;
        let (_, h, w) = current.dims();
        let set = self.freedrag.as_mut().expect("freedrag state");
        for i in 0..self.state.points.len() {
            let Some(class) = set.classes[i] else { continue };
            let here = self.state.points.handles()[i];
            let goal = self.state.points.targets()[i];
            match class {
                AdaptationClass::PoorlyLearned => {
                    let back = set.previous_handles[i];
                    self.state.points.set_handle(i, back);
                }
                AdaptationClass::WellLearned | AdaptationClass::Learning => {
                    let next = match drag_direction(here, goal, tol) {
                        Some((dr, dc)) if here.distance(&goal) > 1.0 => {
                            clamp_to_grid(Point::new(here.row + dr, here.col + dc), h, w)
                        }
                        _ => goal,
                    };
                    set.previous_handles[i] = here;
                    self.state.points.set_handle(i, next);
                    if class == AdaptationClass::WellLearned {
                        set.templates[i] = Template::capture(&current, next, radius)?;
                    }
                }
            }
        }
        Ok(())
    }

    fn gooddrag_denoise(&mut self) -> Result<()> {
        let next = ddim_denoise_step(self.backend, &self.state.latent, &self.state.text)?;
        self.state.latent = next;
        let t = self.state.latent.timestep;
        self.image_anchor = ddim_denoise_step(self.backend, &self.inversion[t], &self.state.cached.text)?;
        Ok(())
    }

    /// Runs one full iteration. Returns `None` once every point has reached
    /// its target or the iteration budget is spent.
    pub fn step(&mut self) -> Result<Option<IterationRecord>> {
        if self.state.k >= self.config.max_iters || !self.retire_reached() {
            return Ok(None);
        }
        let k = self.state.k;
        if let Some(intention) = &self.intention {
            let w = crate::embedmanip::intention_blend_weight(&self.state.points)?;
            self.state.text = crate::embedmanip::intention_blend(&self.state.cached.text, intention, w)?;
        }
        let l_ms = match self.config.method {
            Method::FreeDrag => self.freedrag_round()?,
            _ => self.latent_update()?.total,
        };
        let l_text = if self.config.text_optimization {
            Some(self.text_update()?.total)
        } else {
            None
        };
        match self.config.method {
            Method::FreeDrag => self.freedrag_move()?,
            _ => {
                if (k + 1).is_multiple_of(self.config.variant.drag_steps_per_tracking) {
                    self.point_tracking()?;
                }
            }
        }
        if self.config.method == Method::GoodDrag && gooddrag_denoise_after(k, self.config.variant.gooddrag_b) {
            self.gooddrag_denoise()?;
        }
        self.state.k += 1;
        self.state.latent.iteration = self.state.k;
        let record = IterationRecord {
            k,
            l_ms,
            l_text,
            handles: self.state.points.handles().iter().map(|p| [p.row, p.col]).collect(),
            text_drift_l1: self.state.text.l1_to(&self.state.cached.text),
        };
        self.log.push(record.clone());
        Ok(Some(record))
    }

    /// Interpolation endpoints at the latent's current timestep.
    pub fn endpoints(&self) -> Result<Endpoints> {
        let t = self.state.latent.timestep;
        let original_latent = self.inversion[t].clone();
        let original_bottleneck = match self.state.bottleneck {
            Some(_) => Some(bottleneck_feature(self.backend, &original_latent, t, &self.state.cached.text)?),
            None => None,
        };
        Ok(Endpoints {
            timestep: t,
            original_latent,
            dragged_latent: self.state.latent.clone(),
            original_text: self.state.cached.text.clone(),
            dragged_text: self.state.text.clone(),
            original_bottleneck,
            dragged_bottleneck: self.state.bottleneck.clone(),
        })
    }

    /// Denoises with the final text and decodes.
    pub fn finish(self) -> Result<DragOutcome> {
        let endpoints = self.endpoints()?;
        let image = synthesize(
            self.backend,
            &endpoints.dragged_latent,
            &endpoints.dragged_text,
            endpoints.dragged_bottleneck.as_ref(),
        )?;
        Ok(DragOutcome {
            image,
            endpoints,
            points: self.state.points,
            log: self.log,
        })
    }
}

/// Full pipeline: invert, drag until done, denoise and decode.
pub fn run_drag(
    backend: &dyn DiffusionBackend,
    inputs: &SessionInputs,
    text: &TextEmbedding,
    observer: &mut dyn DragObserver,
) -> Result<DragOutcome> {
    let mut drag = DragLoop::new(backend, inputs, text)?;
    loop {
        if observer.cancelled() {
            return Err(DragError::Cancelled);
        }
        match drag.step()? {
            Some(record) => observer.on_iteration(&record, drag.state()),
            None => break,
        }
    }
    drag.finish()
}
