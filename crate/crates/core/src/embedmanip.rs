//! Embedding arithmetic on drag results: joint latent/text interpolation
//! and extrapolation between the original and dragged endpoints, and the
//! distance-weighted blend of an original prompt with an intention prompt.

use ndarray::{Array2, Array3, Zip};

use crate::backend::DiffusionBackend;
use crate::domain::{ImageTensor, LatentState, PointSet, TextEmbedding};
use crate::drag::{synthesize, Endpoints};
use crate::error::{DragError, Result};

fn blend3(a: &Array3<f64>, b: &Array3<f64>, omega: f64) -> Array3<f64> {
    Zip::from(a).and(b).map_collect(|x, y| (1.0 - omega) * x + omega * y)
}

fn blend2(a: &Array2<f64>, b: &Array2<f64>, omega: f64) -> Array2<f64> {
    Zip::from(a).and(b).map_collect(|x, y| (1.0 - omega) * x + omega * y)
}

/// `(1 - omega) * a + omega * b`. Exact at `omega = 0` and `omega = 1`.
fn lerp(a: f64, b: f64, omega: f64) -> f64 {
    if omega == 0.0 {
        a
    } else if omega == 1.0 {
        b
    } else {
        (1.0 - omega) * a + omega * b
    }
}

/// Blends latents and texts with the same `omega`. Any finite `omega` is
/// allowed; values outside `[0, 1]` extrapolate.
pub fn interpolate_pair(
    original_latent: &LatentState,
    dragged_latent: &LatentState,
    original_text: &TextEmbedding,
    dragged_text: &TextEmbedding,
    omega: f64,
) -> Result<(LatentState, TextEmbedding)> {
    if !omega.is_finite() {
        return Err(DragError::Invalid(format!("omega must be finite, got {omega}")));
    }
    if original_latent.dims() != dragged_latent.dims() {
        return Err(DragError::ShapeMismatch(format!(
            "latents {:?} and {:?}",
            original_latent.dims(),
            dragged_latent.dims()
        )));
    }
    if original_text.values.dim() != dragged_text.values.dim() {
        return Err(DragError::ShapeMismatch(format!(
            "text embeddings {:?} and {:?}",
            original_text.values.dim(),
            dragged_text.values.dim()
        )));
    }
    let latent_values = Zip::from(&original_latent.values)
        .and(&dragged_latent.values)
        .map_collect(|x, y| lerp(*x, *y, omega));
    let text_values = Zip::from(&original_text.values)
        .and(&dragged_text.values)
        .map_collect(|x, y| lerp(*x, *y, omega));
    let latent = LatentState::new(latent_values, original_latent.timestep)?;
    let text = TextEmbedding::new(text_values, original_text.semantic_len())?;
    Ok((latent, text))
}

/// Bottleneck blend for endpoints that carry one (DragNoise).
fn interpolate_bottleneck(endpoints: &Endpoints, omega: f64) -> Result<Option<Array3<f64>>> {
    match (&endpoints.original_bottleneck, &endpoints.dragged_bottleneck) {
        (Some(a), Some(b)) => {
            if a.dim() != b.dim() {
                return Err(DragError::ShapeMismatch(format!("bottlenecks {:?} and {:?}", a.dim(), b.dim())));
            }
            Ok(Some(if omega == 0.0 {
                a.clone()
            } else if omega == 1.0 {
                b.clone()
            } else {
                blend3(a, b, omega)
            }))
        }
        (None, None) => Ok(None),
        _ => Err(DragError::ShapeMismatch("only one endpoint carries a bottleneck".into())),
    }
}

/// Denoises and decodes the blend at `omega`.
pub fn render_at(backend: &dyn DiffusionBackend, endpoints: &Endpoints, omega: f64) -> Result<ImageTensor> {
    let (latent, text) = interpolate_pair(
        &endpoints.original_latent,
        &endpoints.dragged_latent,
        &endpoints.original_text,
        &endpoints.dragged_text,
        omega,
    )?;
    let bottleneck = interpolate_bottleneck(endpoints, omega)?;
    synthesize(backend, &latent, &text, bottleneck.as_ref())
}

/// One decoded image per `omega`, in order.
pub fn render_interpolation(
    backend: &dyn DiffusionBackend,
    endpoints: &Endpoints,
    omegas: &[f64],
) -> Result<Vec<ImageTensor>> {
    omegas.iter().map(|w| render_at(backend, endpoints, *w)).collect()
}

/// `w^k = sum_i |g_i - h_i^k| / sum_i |g_i - h_i^0|`, the weight on the
/// original prompt embedding.
pub fn intention_blend_weight(points: &PointSet) -> Result<f64> {
    let initial: f64 = points
        .initial_handles()
        .iter()
        .zip(points.targets())
        .map(|(h, g)| h.distance(g))
        .sum();
    if initial == 0.0 {
        return Err(DragError::ZeroInitialDistance);
    }
    let current: f64 = points.handles().iter().zip(points.targets()).map(|(h, g)| h.distance(g)).sum();
    Ok(current / initial)
}

/// `w * original + (1 - w) * intention`.
pub fn intention_blend(original: &TextEmbedding, intention: &TextEmbedding, w: f64) -> Result<TextEmbedding> {
    if original.values.dim() != intention.values.dim() {
        return Err(DragError::ShapeMismatch(format!(
            "text embeddings {:?} and {:?}",
            original.values.dim(),
            intention.values.dim()
        )));
    }
    let values = if w == 1.0 {
        original.values.clone()
    } else if w == 0.0 {
        intention.values.clone()
    } else {
        blend2(&intention.values, &original.values, w)
    };
    TextEmbedding::new(values, original.semantic_len().max(intention.semantic_len()))
}
