//! Method-specific pieces: FreeDrag templates and gating, GoodDrag's
//! anchored displacement and denoising schedule. DragNoise only swaps the
//! optimised tensor and lives in the drag loop itself.

use serde::{Deserialize, Serialize};

use crate::domain::{FeatureMap, Point, PointSet};
use crate::drag::geometry::{bilinear_sample, clamp_to_grid, drag_direction, region_offsets};
use crate::drag::loss::{PointTerm, Reference};
use crate::error::Result;

/// How well a FreeDrag template was matched after a round of motion
/// supervision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptationClass {
    WellLearned,
    Learning,
    PoorlyLearned,
}

impl AdaptationClass {
    /// Text-loss gate: poorly learned points are excluded.
    pub fn alpha(self) -> f64 {
        match self {
            AdaptationClass::PoorlyLearned => 0.0,
            _ => 1.0,
        }
    }
}

/// Classifies a final per-point template loss. Boundaries go to the lower
/// (better) class.
pub fn freedrag_classify(loss: f64, tau_lo: f64, tau_hi: f64) -> AdaptationClass {
    if loss <= tau_lo {
        AdaptationClass::WellLearned
    } else if loss <= tau_hi {
        AdaptationClass::Learning
    } else {
        AdaptationClass::PoorlyLearned
    }
}

/// A per-point template: one feature vector per in-bounds region offset.
#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    pub offsets: Vec<(i64, i64)>,
    /// Position-major `offsets.len() x C`.
    pub values: Vec<f64>,
    channels: usize,
}

impl Template {
    /// Samples `fmap` on the square of radius `radius` around `center`.
    pub fn capture(fmap: &FeatureMap, center: Point, radius: usize) -> Result<Self> {
        let (c, h, w) = fmap.dims();
        let offsets = region_offsets(center, radius, h, w);
        let mut values = Vec::with_capacity(offsets.len() * c);
        for (dr, dc) in &offsets {
            values.extend(bilinear_sample(fmap, Point::new(center.row + *dr as f64, center.col + *dc as f64))?);
        }
        Ok(Self {
            offsets,
            values,
            channels: c,
        })
    }

    fn vector(&self, slot: usize) -> &[f64] {
        &self.values[slot * self.channels..(slot + 1) * self.channels]
    }
}

/// FreeDrag bookkeeping carried across rounds.
#[derive(Debug, Clone)]
pub struct TemplateFeatureSet {
    pub templates: Vec<Template>,
    pub classes: Vec<Option<AdaptationClass>>,
    /// First-round template loss per point; thresholds scale from it.
    pub initial_losses: Vec<Option<f64>>,
    pub previous_handles: Vec<Point>,
}

impl TemplateFeatureSet {
    pub fn new(original: &FeatureMap, points: &PointSet, radius: usize) -> Result<Self> {
        let templates = points
            .initial_handles()
            .iter()
            .map(|h| Template::capture(original, *h, radius))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            classes: vec![None; templates.len()],
            initial_losses: vec![None; templates.len()],
            previous_handles: points.handles().to_vec(),
            templates,
        })
    }

    pub fn alphas(&self) -> Vec<f64> {
        self.classes
            .iter()
            .map(|c| c.map_or(1.0, AdaptationClass::alpha))
            .collect()
    }
}

/// Displacement terms matching moved samples against each point's template.
pub fn freedrag_terms(
    points: &PointSet,
    templates: &TemplateFeatureSet,
    alphas: &[f64],
    radius: usize,
    tolerance: f64,
    height: usize,
    width: usize,
) -> Vec<PointTerm> {
    let mut out = Vec::new();
    for i in 0..points.len() {
        if !points.is_active(i) {
            continue;
        }
        let h = points.handles()[i];
        let Some((dr, dc)) = drag_direction(h, points.targets()[i], tolerance) else {
            continue;
        };
        let valid = region_offsets(h, radius, height, width);
        let tpl = &templates.templates[i];
        let mut moved = Vec::new();
        let mut reference = Vec::new();
        for (slot, off) in tpl.offsets.iter().enumerate() {
            if !valid.contains(off) {
                continue;
            }
            let q = Point::new(h.row + off.0 as f64 + dr, h.col + off.1 as f64 + dc);
            moved.push(clamp_to_grid(q, height, width));
            reference.extend_from_slice(tpl.vector(slot));
        }
        if moved.is_empty() {
            continue;
        }
        out.push(PointTerm {
            index: i,
            weight: alphas[i],
            moved,
            reference: Reference::Fixed(reference),
        });
    }
    out
}

/// Step multiplier applied to the drag direction in GoodDrag's loss.
pub const GOODDRAG_STEP: f64 = 4.0;

/// GoodDrag's anchored terms: samples `4 d` ahead of the current region are
/// pulled toward the original features around the initial handle.
pub fn gooddrag_terms(
    points: &PointSet,
    original: &FeatureMap,
    radius: usize,
    tolerance: f64,
) -> Result<Vec<PointTerm>> {
    let (c, height, width) = original.dims();
    let mut out = Vec::new();
    for i in 0..points.len() {
        if !points.is_active(i) {
            continue;
        }
        let h = points.handles()[i];
        let h0 = points.initial_handles()[i];
        let Some((dr, dc)) = drag_direction(h, points.targets()[i], tolerance) else {
            continue;
        };
        let here = region_offsets(h, radius, height, width);
        let there = region_offsets(h0, radius, height, width);
        let mut moved = Vec::new();
        let mut reference = Vec::with_capacity(here.len() * c);
        for off in here.iter().filter(|o| there.contains(o)) {
            let q = Point::new(
                h.row + off.0 as f64 + GOODDRAG_STEP * dr,
                h.col + off.1 as f64 + GOODDRAG_STEP * dc,
            );
            moved.push(clamp_to_grid(q, height, width));
            reference.extend(bilinear_sample(
                original,
                Point::new(h0.row + off.0 as f64, h0.col + off.1 as f64),
            )?);
        }
        if moved.is_empty() {
            continue;
        }
        out.push(PointTerm {
            index: i,
            weight: 1.0,
            moved,
            reference: Reference::Fixed(reference),
        });
    }
    Ok(out)
}

/// Timestep a GoodDrag latent sits at after `k` completed drag iterations.
pub fn gooddrag_timestep(start: usize, k: usize, b: usize) -> usize {
    start - k / b
}

/// Whether a denoising step follows drag iteration `k` (0-based).
pub fn gooddrag_denoise_after(k: usize, b: usize) -> bool {
    (k + 1).is_multiple_of(b)
}
