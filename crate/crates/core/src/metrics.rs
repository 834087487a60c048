//! Edit-quality metrics: Mean Distance through feature correspondence, a
//! pluggable perceptual distance, and their product.

use serde::{Deserialize, Serialize};

use crate::backend::{feature_map, DiffusionBackend};
use crate::domain::{FeatureMap, ImageTensor, Point, PointSet, TextEmbedding};
use crate::drag::geometry::bilinear_sample;
use crate::error::{DragError, Result};

/// Timestep label at which correspondence features are extracted.
pub const CORRESPONDENCE_TIMESTEP: usize = 1;
/// Decoder block used for correspondence features.
pub const CORRESPONDENCE_BLOCK: u8 = 3;

/// Grid position in `edited` whose feature vector is nearest (L2) to
/// `query`. Ties go to the first position in row-major order.
pub fn correspondence(edited: &FeatureMap, query: &[f64]) -> Point {
    let (c, h, w) = edited.dims();
    assert_eq!(query.len(), c, "query length must match feature channels");
    let mut best = (f64::INFINITY, 0, 0);
    for r in 0..h {
        for col in 0..w {
            let d: f64 = (0..c).map(|ch| (edited.values[[ch, r, col]] - query[ch]).powi(2)).sum();
            if d < best.0 {
                best = (d, r, col);
            }
        }
    }
    Point::new(best.1 as f64, best.2 as f64)
}

/// Located final handles and their distances to the targets, in feature units.
pub fn locate_handles(original: &FeatureMap, edited: &FeatureMap, points: &PointSet) -> Result<(Vec<Point>, Vec<f64>)> {
    if original.dims() != edited.dims() {
        return Err(DragError::ResolutionMismatch(format!(
            "feature maps {:?} and {:?}",
            original.dims(),
            edited.dims()
        )));
    }
    let mut located = Vec::with_capacity(points.len());
    let mut distances = Vec::with_capacity(points.len());
    for (h0, g) in points.initial_handles().iter().zip(points.targets()) {
        let query = bilinear_sample(original, *h0)?;
        let p = correspondence(edited, &query);
        distances.push(p.distance(g));
        located.push(p);
    }
    Ok((located, distances))
}

/// Correspondence features of an image: encoded, evaluated at
/// [`CORRESPONDENCE_TIMESTEP`] under `text`, read from [`CORRESPONDENCE_BLOCK`].
pub fn correspondence_features(
    backend: &dyn DiffusionBackend,
    image: &ImageTensor,
    text: &TextEmbedding,
) -> Result<FeatureMap> {
    let z = backend.encode(image)?;
    feature_map(backend, &z, CORRESPONDENCE_TIMESTEP, text, CORRESPONDENCE_BLOCK)
}

/// Per-point distances in image pixels between located handles and targets.
pub fn point_distances(
    backend: &dyn DiffusionBackend,
    original: &ImageTensor,
    edited: &ImageTensor,
    points: &PointSet,
    text: &TextEmbedding,
) -> Result<Vec<f64>> {
    check_same_size(original, edited)?;
    let fo = correspondence_features(backend, original, text)?;
    let fe = correspondence_features(backend, edited, text)?;
    let scale = backend.info().latent_downsample_factor as f64;
    Ok(locate_handles(&fo, &fe, points)?.1.into_iter().map(|d| d * scale).collect())
}

/// Mean Distance between correspondence-located handles and targets, in
/// image pixels. `points` are in feature units.
pub fn mean_distance(
    backend: &dyn DiffusionBackend,
    original: &ImageTensor,
    edited: &ImageTensor,
    points: &PointSet,
    text: &TextEmbedding,
) -> Result<f64> {
    let d = point_distances(backend, original, edited, points, text)?;
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

fn check_same_size(a: &ImageTensor, b: &ImageTensor) -> Result<()> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(DragError::ResolutionMismatch(format!(
            "{}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

/// Source of a perceptual distance between two images.
pub trait PerceptualMetric: Send + Sync {
    fn name(&self) -> &str;

    fn distance(&self, a: &ImageTensor, b: &ImageTensor) -> Result<f64>;
}

/// Mean absolute pixel difference. A stand-in for a learned perceptual
/// metric; its values are not comparable with LPIPS.
#[derive(Debug, Clone, Copy, Default)]
pub struct MeanAbsProxy;

impl PerceptualMetric for MeanAbsProxy {
    fn name(&self) -> &str {
        "mean-abs-proxy"
    }

    fn distance(&self, a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
        check_same_size(a, b)?;
        let n = a.data().len() as f64;
        Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / n)
    }
}

pub fn perceptual_distance(metric: &dyn PerceptualMetric, a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    metric.distance(a, b)
}

/// Product of a perceptual distance and Mean Distance (lower is better).
pub fn combined_score(perceptual: f64, md: f64) -> f64 {
    perceptual * md
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub md: f64,
    pub perceptual: f64,
    pub product: f64,
    pub per_point_distances: Vec<f64>,
}

impl MetricsReport {
    pub fn compute(
        backend: &dyn DiffusionBackend,
        metric: &dyn PerceptualMetric,
        original: &ImageTensor,
        edited: &ImageTensor,
        points: &PointSet,
        text: &TextEmbedding,
    ) -> Result<Self> {
        let per_point_distances = point_distances(backend, original, edited, points, text)?;
        let md = per_point_distances.iter().sum::<f64>() / per_point_distances.len() as f64;
        let perceptual = metric.distance(original, edited)?;
        Ok(Self {
            md,
            perceptual,
            product: combined_score(perceptual, md),
            per_point_distances,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn products_of_published_pairs() {
        assert!((combined_score(0.117, 33.21) - 3.8856).abs() < 1e-4);
        assert!((combined_score(0.124, 29.78) - 3.6927).abs() < 1e-4);
        assert_eq!(combined_score(0.0, 12.5), 0.0);
    }

    #[test]
    fn proxy_is_zero_on_identical_and_rejects_size_mismatch() {
        let a = ImageTensor::new(Array3::from_elem((3, 4, 4), 0.3)).unwrap();
        let b = ImageTensor::new(Array3::from_elem((3, 4, 5), 0.3)).unwrap();
        assert_eq!(MeanAbsProxy.distance(&a, &a).unwrap(), 0.0);
        assert!(matches!(MeanAbsProxy.distance(&a, &b), Err(DragError::ResolutionMismatch(_))));
    }
}
