//! Value types shared by every stage of a drag edit, plus input validation.
//!
//! Coordinates are `(row, col)` in feature-grid units throughout.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{DragError, Result};

/// Number of token rows in a text embedding.
pub const TOKEN_ROWS: usize = 77;

/// RGB image, `3 x H x W`, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    data: Array3<f64>,
}

impl ImageTensor {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (c, h, w) = data.dim();
        if c != 3 {
            return Err(DragError::Shape(format!("expected 3 channels, got {c}")));
        }
        if h == 0 || w == 0 {
            return Err(DragError::Shape("image has a zero dimension".into()));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(DragError::Invalid(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Self { data })
    }

    /// Builds an image from decoder output, clamping into `[0, 1]`.
    pub fn from_unclamped(mut data: Array3<f64>) -> Result<Self> {
        data.mapv_inplace(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) });
        Self::new(data)
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }
}

/// A latent grid `C x H x W` at a diffusion timestep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentState {
    pub values: Array3<f64>,
    pub timestep: usize,
    pub iteration: usize,
}

impl LatentState {
    pub fn new(values: Array3<f64>, timestep: usize) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(DragError::Invalid("latent contains non-finite values".into()));
        }
        Ok(Self {
            values,
            timestep,
            iteration: 0,
        })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.values.dim()
    }

    pub fn as_slice(&self) -> &[f64] {
        self.values
            .as_slice()
            .expect("latent arrays are kept in standard layout")
    }

    pub(crate) fn with_values(&self, data: Vec<f64>) -> Self {
        let values = Array3::from_shape_vec(self.values.dim(), data).expect("same length");
        Self {
            values,
            timestep: self.timestep,
            iteration: self.iteration,
        }
    }
}

/// `77 x d` conditioning matrix. The first `semantic_len` rows carry meaning
/// (begin token plus prompt tokens); end and padding rows follow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextEmbedding {
    pub values: Array2<f64>,
    semantic_len: usize,
}

impl TextEmbedding {
    pub fn new(values: Array2<f64>, semantic_len: usize) -> Result<Self> {
        let (rows, d) = values.dim();
        if rows != TOKEN_ROWS {
            return Err(DragError::Shape(format!("expected {TOKEN_ROWS} token rows, got {rows}")));
        }
        if d == 0 {
            return Err(DragError::Shape("embedding dimension is zero".into()));
        }
        if !(1..=TOKEN_ROWS).contains(&semantic_len) {
            return Err(DragError::Invalid(format!("semantic length {semantic_len} not in 1..=77")));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(DragError::Invalid("text embedding contains non-finite values".into()));
        }
        Ok(Self {
            values,
            semantic_len,
        })
    }

    pub fn semantic_len(&self) -> usize {
        self.semantic_len
    }

    pub fn dim(&self) -> usize {
        self.values.dim().1
    }

    /// Binary mask, one constant row per token: ones for semantic rows.
    pub fn token_mask(&self) -> Array2<f64> {
        let d = self.dim();
        Array2::from_shape_fn((TOKEN_ROWS, d), |(r, _)| {
            if r < self.semantic_len {
                1.0
            } else {
                0.0
            }
        })
    }

    pub fn as_slice(&self) -> &[f64] {
        self.values.as_slice().expect("standard layout")
    }

    /// Same mask, new values.
    pub fn with_values(&self, data: Vec<f64>) -> Self {
        let values = Array2::from_shape_vec(self.values.dim(), data).expect("same length");
        Self {
            values,
            semantic_len: self.semantic_len,
        }
    }

    /// L1 distance to `other` restricted to the semantic rows.
    pub fn masked_l1_to(&self, other: &TextEmbedding) -> f64 {
        let d = self.dim();
        self.as_slice()
            .iter()
            .zip(other.as_slice())
            .take(self.semantic_len * d)
            .map(|(a, b)| (a - b).abs())
            .sum()
    }

    pub fn l1_to(&self, other: &TextEmbedding) -> f64 {
        self.as_slice()
            .iter()
            .zip(other.as_slice())
            .map(|(a, b)| (a - b).abs())
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub row: f64,
    pub col: f64,
}

impl Point {
    pub fn new(row: f64, col: f64) -> Self {
        Self { row, col }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        ((self.row - other.row).powi(2) + (self.col - other.col).powi(2)).sqrt()
    }

    pub fn in_bounds(&self, height: usize, width: usize) -> bool {
        self.row.is_finite()
            && self.col.is_finite()
            && self.row >= 0.0
            && self.col >= 0.0
            && self.row <= (height - 1) as f64
            && self.col <= (width - 1) as f64
    }
}

impl From<(f64, f64)> for Point {
    fn from((row, col): (f64, f64)) -> Self {
        Self { row, col }
    }
}

/// Handle/target pairs with the evolving handle positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointSet {
    handles: Vec<Point>,
    targets: Vec<Point>,
    initial_handles: Vec<Point>,
    active: Vec<bool>,
}

impl PointSet {
    pub fn new(pairs: &[(Point, Point)]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(DragError::Invalid("at least one handle/target pair is required".into()));
        }
        let handles: Vec<Point> = pairs.iter().map(|p| p.0).collect();
        Ok(Self {
            initial_handles: handles.clone(),
            handles,
            targets: pairs.iter().map(|p| p.1).collect(),
            active: vec![true; pairs.len()],
        })
    }

    pub fn len(&self) -> usize {
        self.handles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.handles.is_empty()
    }

    pub fn handles(&self) -> &[Point] {
        &self.handles
    }

    pub fn targets(&self) -> &[Point] {
        &self.targets
    }

    pub fn initial_handles(&self) -> &[Point] {
        &self.initial_handles
    }

    pub fn is_active(&self, i: usize) -> bool {
        self.active[i]
    }

    pub fn active_flags(&self) -> &[bool] {
        &self.active
    }

    pub fn any_active(&self) -> bool {
        self.active.iter().any(|a| *a)
    }

    /// Permanently retires point `i`.
    pub fn deactivate(&mut self, i: usize) {
        self.active[i] = false;
    }

    /// Moves an active handle. Returns `false` (and does nothing) for a
    /// retired point.
    pub fn set_handle(&mut self, i: usize, p: Point) -> bool {
        if !self.active[i] {
            return false;
        }
        self.handles[i] = p;
        true
    }

    /// Mean distance from current handles to their targets.
    pub fn mean_target_distance(&self) -> f64 {
        self.handles
            .iter()
            .zip(&self.targets)
            .map(|(h, g)| h.distance(g))
            .sum::<f64>()
            / self.len() as f64
    }

    /// Mean distance travelled by handles from their start positions.
    pub fn mean_displacement(&self) -> f64 {
        self.handles
            .iter()
            .zip(&self.initial_handles)
            .map(|(h, h0)| h.distance(h0))
            .sum::<f64>()
            / self.len() as f64
    }

    /// Divides every coordinate by `factor` (image space to feature space).
    pub fn scaled_down(&self, factor: usize) -> Self {
        let f = factor as f64;
        let s = |p: &Point| Point::new(p.row / f, p.col / f);
        Self {
            handles: self.handles.iter().map(s).collect(),
            targets: self.targets.iter().map(s).collect(),
            initial_handles: self.initial_handles.iter().map(s).collect(),
            active: self.active.clone(),
        }
    }
}

/// Binary editable-region mask aligned to the latent grid (1 = editable).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditMask {
    values: Array2<f64>,
}

impl EditMask {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.iter().any(|v| *v != 0.0 && *v != 1.0) {
            return Err(DragError::Invalid("mask entries must be 0 or 1".into()));
        }
        if !values.iter().any(|v| *v == 1.0) {
            return Err(DragError::EmptyMask);
        }
        Ok(Self { values })
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            values: Array2::ones((height, width)),
        }
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn dims(&self) -> (usize, usize) {
        self.values.dim()
    }

    /// `1 - M` broadcast over `channels`, flattened `C x H x W`.
    pub fn frozen_weights(&self, channels: usize) -> Vec<f64> {
        let plane: Vec<f64> = self.values.iter().map(|m| 1.0 - m).collect();
        (0..channels).flat_map(|_| plane.iter().copied()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    DragDiffusion,
    FreeDrag,
    DragNoise,
    GoodDrag,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::DragDiffusion,
        Method::FreeDrag,
        Method::DragNoise,
        Method::GoodDrag,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::DragDiffusion => "dragdiffusion",
            Method::FreeDrag => "freedrag",
            Method::DragNoise => "dragnoise",
            Method::GoodDrag => "gooddrag",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = DragError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| DragError::bad_config("method", format!("unknown method {s:?}")))
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Knobs that only some methods read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantConfig {
    /// Drag iterations between interleaved denoising steps (GoodDrag).
    pub gooddrag_b: usize,
    /// Drag optimizations per point-tracking pass.
    pub drag_steps_per_tracking: usize,
    /// Motion-supervision passes per FreeDrag round.
    pub freedrag_max_inner: usize,
    /// FreeDrag class thresholds as multiples of each point's first-round loss.
    pub freedrag_tau_lo_scale: f64,
    pub freedrag_tau_hi_scale: f64,
    /// Multiplier applied to both learning rates for GoodDrag.
    pub gooddrag_step_scale: f64,
}

impl VariantConfig {
    pub fn for_method(method: Method) -> Self {
        Self {
            gooddrag_b: 10,
            drag_steps_per_tracking: if method == Method::GoodDrag { 3 } else { 1 },
            freedrag_max_inner: 5,
            freedrag_tau_lo_scale: 0.1,
            freedrag_tau_hi_scale: 1.0,
            gooddrag_step_scale: 0.5,
        }
    }
}

/// Hyperparameters of one drag run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DragConfig {
    pub method: Method,
    pub timestep: usize,
    pub max_iters: usize,
    pub region_radius_ms: usize,
    pub region_radius_pt: usize,
    pub lr_latent: f64,
    pub lr_text: f64,
    pub lambda_image: f64,
    pub lambda_text: f64,
    pub unet_block: u8,
    pub reach_tolerance: f64,
    /// When false the text embedding is never updated (ablation).
    pub text_optimization: bool,
    pub variant: VariantConfig,
}

impl DragConfig {
    /// Published per-method hyperparameters with the shared text settings.
    pub fn for_method(method: Method) -> Self {
        let (timestep, max_iters, r1, lr_latent, lambda_image, r2) = match method {
            Method::DragDiffusion => (35, 80, 1, 0.01, 0.1, 3),
            Method::FreeDrag => (35, 300, 3, 0.01, 10.0, 3),
            Method::DragNoise => (35, 80, 1, 0.02, 0.2, 3),
            Method::GoodDrag => (38, 70, 4, 0.02, 0.2, 12),
        };
        Self {
            method,
            timestep,
            max_iters,
            region_radius_ms: r1,
            region_radius_pt: r2,
            lr_latent,
            lr_text: 0.004,
            lambda_image,
            lambda_text: 0.1,
            unet_block: 3,
            reach_tolerance: 1.0,
            text_optimization: true,
            variant: VariantConfig::for_method(method),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &'static str, reason: String| Err(DragError::bad_config(field, reason));
        if self.max_iters == 0 {
            return bad("max_iters", "must be at least 1".into());
        }
        if self.timestep == 0 {
            return bad("timestep", "must be at least 1".into());
        }
        if self.region_radius_ms == 0 {
            return bad("region_radius_ms", "must be positive".into());
        }
        if self.region_radius_pt == 0 {
            return bad("region_radius_pt", "must be positive".into());
        }
        for (name, v) in [("lr_latent", self.lr_latent), ("lr_text", self.lr_text)] {
            if !(v.is_finite() && v > 0.0) {
                return bad(name, format!("must be positive, got {v}"));
            }
        }
        for (name, v) in [("lambda_image", self.lambda_image), ("lambda_text", self.lambda_text)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(name, format!("must be non-negative, got {v}"));
            }
        }
        if !(self.reach_tolerance.is_finite() && self.reach_tolerance > 0.0) {
            return bad("reach_tolerance", "must be positive".into());
        }
        if !(1..=4).contains(&self.unet_block) {
            return bad("unet_block", format!("{} not in 1..=4", self.unet_block));
        }
        let v = &self.variant;
        if v.drag_steps_per_tracking == 0 {
            return bad("variant.drag_steps_per_tracking", "must be positive".into());
        }
        if v.freedrag_max_inner == 0 {
            return bad("variant.freedrag_max_inner", "must be positive".into());
        }
        if !(v.freedrag_tau_lo_scale >= 0.0 && v.freedrag_tau_lo_scale <= v.freedrag_tau_hi_scale) {
            return bad("variant.freedrag_tau_lo_scale", "thresholds must satisfy 0 <= lo <= hi".into());
        }
        if !(v.gooddrag_step_scale > 0.0 && v.gooddrag_step_scale.is_finite()) {
            return bad("variant.gooddrag_step_scale", "must be positive".into());
        }
        if self.method == Method::GoodDrag {
            if v.gooddrag_b == 0 || !self.max_iters.is_multiple_of(v.gooddrag_b) {
                return bad(
                    "max_iters",
                    format!("{} must be divisible by gooddrag_b {}", self.max_iters, v.gooddrag_b),
                );
            }
            if self.max_iters / v.gooddrag_b >= self.timestep {
                return bad("max_iters", "gooddrag would denoise past timestep 0".into());
            }
        }
        Ok(())
    }

    /// Learning rates after method-specific scaling.
    pub fn effective_rates(&self) -> (f64, f64) {
        if self.method == Method::GoodDrag {
            let s = self.variant.gooddrag_step_scale;
            (self.lr_latent * s, self.lr_text * s)
        } else {
            (self.lr_latent, self.lr_text)
        }
    }
}

impl Default for DragConfig {
    fn default() -> Self {
        Self::for_method(Method::DragDiffusion)
    }
}

/// Backend decoder features `C_f x H_f x W_f`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub values: Array3<f64>,
    pub source_block: u8,
}

impl FeatureMap {
    pub fn dims(&self) -> (usize, usize, usize) {
        self.values.dim()
    }

    pub fn as_slice(&self) -> &[f64] {
        self.values.as_slice().expect("standard layout")
    }
}

/// Inputs that passed [`validate_session_inputs`].
#[derive(Debug, Clone)]
pub struct SessionInputs {
    pub image: ImageTensor,
    pub mask: EditMask,
    pub points: PointSet,
    pub config: DragConfig,
}

/// Checks every cross-type invariant of a drag session. `downsample` is the
/// backend's latent downsampling factor; points are in feature units.
pub fn validate_session_inputs(
    image: ImageTensor,
    mask: EditMask,
    points: PointSet,
    config: DragConfig,
    downsample: usize,
) -> Result<SessionInputs> {
    config.validate()?;
    let (h, w) = (image.height(), image.width());
    if downsample == 0 || h % downsample != 0 || w % downsample != 0 {
        return Err(DragError::Shape(format!(
            "image {h}x{w} not divisible by downsampling factor {downsample}"
        )));
    }
    let (lh, lw) = (h / downsample, w / downsample);
    if mask.dims() != (lh, lw) {
        return Err(DragError::Shape(format!(
            "mask is {:?}, latent grid is {lh}x{lw}",
            mask.dims()
        )));
    }
    for (i, (hp, gp)) in points.handles().iter().zip(points.targets()).enumerate() {
        for (role, p) in [("handle", hp), ("target", gp)] {
            if !p.in_bounds(lh, lw) {
                return Err(DragError::OutOfBoundsPoint {
                    index: i,
                    role,
                    row: p.row,
                    col: p.col,
                    height: lh,
                    width: lw,
                });
            }
        }
    }
    Ok(SessionInputs {
        image,
        mask,
        points,
        config,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(h: usize, w: usize) -> ImageTensor {
        ImageTensor::new(Array3::from_elem((3, h, w), 0.5)).unwrap()
    }

    fn pair(h: (f64, f64), g: (f64, f64)) -> PointSet {
        PointSet::new(&[(h.into(), g.into())]).unwrap()
    }

    #[test]
    fn accepts_valid_inputs() {
        let out = validate_session_inputs(
            image(512, 512),
            EditMask::full(64, 64),
            pair((10.0, 10.0), (12.0, 20.0)),
            DragConfig::default(),
            8,
        );
        assert!(out.is_ok());
    }

    #[test]
    fn rejects_out_of_bounds_handle() {
        let err = validate_session_inputs(
            image(16, 16),
            EditMask::full(16, 16),
            pair((-1.0, 4.0), (3.0, 3.0)),
            DragConfig::default(),
            1,
        )
        .unwrap_err();
        assert!(matches!(err, DragError::OutOfBoundsPoint { index: 0, role: "handle", .. }));
    }

    #[test]
    fn empty_mask_is_rejected() {
        assert!(matches!(
            EditMask::new(Array2::zeros((4, 4))),
            Err(DragError::EmptyMask)
        ));
    }

    #[test]
    fn gooddrag_requires_divisible_iterations() {
        let mut cfg = DragConfig::for_method(Method::GoodDrag);
        assert_eq!((cfg.max_iters, cfg.variant.gooddrag_b), (70, 10));
        assert!(cfg.validate().is_ok());
        cfg.max_iters = 71;
        assert!(matches!(cfg.validate(), Err(DragError::BadConfig { .. })));
    }

    #[test]
    fn token_mask_rows_are_constant() {
        let e = TextEmbedding::new(Array2::from_elem((77, 8), 0.3), 5).unwrap();
        let m = e.token_mask();
        for row in m.rows() {
            assert!(row.iter().all(|v| *v == row[0]));
        }
        assert_eq!(m.rows().into_iter().filter(|r| r[0] == 1.0).count(), 5);
    }

    #[test]
    fn deactivation_is_permanent() {
        let mut p = pair((1.0, 1.0), (5.0, 5.0));
        p.deactivate(0);
        assert!(!p.set_handle(0, Point::new(2.0, 2.0)));
        assert_eq!(p.handles()[0], Point::new(1.0, 1.0));
        assert!(!p.any_active());
    }

    #[test]
    fn published_defaults() {
        let d = DragConfig::for_method(Method::DragDiffusion);
        assert_eq!((d.timestep, d.max_iters, d.region_radius_ms, d.region_radius_pt), (35, 80, 1, 3));
        assert_eq!((d.lr_latent, d.lambda_image, d.lr_text, d.lambda_text), (0.01, 0.1, 0.004, 0.1));
        let f = DragConfig::for_method(Method::FreeDrag);
        assert_eq!((f.max_iters, f.region_radius_ms, f.lambda_image), (300, 3, 10.0));
        let n = DragConfig::for_method(Method::DragNoise);
        assert_eq!((n.lr_latent, n.lambda_image), (0.02, 0.2));
        let g = DragConfig::for_method(Method::GoodDrag);
        assert_eq!((g.timestep, g.region_radius_ms, g.region_radius_pt), (38, 4, 12));
        assert_eq!(g.variant.drag_steps_per_tracking, 3);
        assert_eq!(g.unet_block, 3);
    }
}
