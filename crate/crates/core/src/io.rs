//! File formats shared by the CLI and the service: image and mask PNGs,
//! the points JSON schema, config overrides, and the full
//! invert-drag-decode-measure pipeline.

use std::io::Cursor;

use image::{GrayImage, ImageFormat, ImageReader, RgbImage};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::backend::DiffusionBackend;
use crate::domain::{
    validate_session_inputs, DragConfig, EditMask, ImageTensor, Method, Point, PointSet, SessionInputs, TextEmbedding,
};
use crate::drag::{run_drag, DragObserver, DragOutcome};
use crate::error::{DragError, Result};
use crate::metrics::{MeanAbsProxy, MetricsReport};

/// Largest accepted image side in pixels.
pub const MAX_IMAGE_SIDE: u32 = 4096;

/// Decodes PNG or JPEG bytes into an RGB image tensor.
pub fn decode_image(bytes: &[u8]) -> Result<ImageTensor> {
    let reader = ImageReader::new(Cursor::new(bytes)).with_guessed_format()?;
    match reader.format() {
        Some(ImageFormat::Png | ImageFormat::Jpeg) => {}
        _ => return Err(DragError::Invalid("image must be PNG or JPEG".into())),
    }
    let (width, height) = ImageReader::new(Cursor::new(bytes))
        .with_guessed_format()?
        .into_dimensions()?;
    if width > MAX_IMAGE_SIDE || height > MAX_IMAGE_SIDE {
        return Err(DragError::TooLarge {
            width,
            height,
            limit: MAX_IMAGE_SIDE,
        });
    }
    let rgb = reader.decode()?.to_rgb8();
    let data = Array3::from_shape_fn((3, height as usize, width as usize), |(c, y, x)| {
        f64::from(rgb.get_pixel(x as u32, y as u32)[c]) / 255.0
    });
    ImageTensor::new(data)
}

/// 8-bit RGB PNG of an image tensor.
pub fn encode_png(image: &ImageTensor) -> Vec<u8> {
    let (h, w) = (image.height(), image.width());
    let data = image.data();
    let rgb = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        image::Rgb(std::array::from_fn(|c| {
            (data[[c, y as usize, x as usize]] * 255.0).round() as u8
        }))
    });
    let mut out = Vec::new();
    rgb.write_to(&mut Cursor::new(&mut out), ImageFormat::Png)
        .expect("in-memory PNG encoding cannot fail");
    out
}

/// Images side by side, left to right.
pub fn strip(images: &[ImageTensor]) -> Result<ImageTensor> {
    let first = images.first().ok_or_else(|| DragError::Invalid("no images to join".into()))?;
    let h = first.height();
    if images.iter().any(|im| im.height() != h) {
        return Err(DragError::ResolutionMismatch("strip images differ in height".into()));
    }
    let views: Vec<_> = images.iter().map(|im| im.data().view()).collect();
    let joined = ndarray::concatenate(ndarray::Axis(2), &views).expect("heights checked");
    ImageTensor::new(joined)
}

/// Reads a single-channel mask PNG at image resolution (nonzero = editable)
/// and reduces it to the latent grid: a cell is editable when any of its
/// pixels is.
pub fn decode_mask(bytes: &[u8], image_height: usize, image_width: usize, downsample: usize) -> Result<EditMask> {
    let gray = image::load_from_memory(bytes)?.to_luma8();
    let (w, h) = gray.dimensions();
    if (h as usize, w as usize) != (image_height, image_width) {
        return Err(DragError::ResolutionMismatch(format!(
            "mask is {h}x{w}, image is {image_height}x{image_width}"
        )));
    }
    let f = downsample.max(1);
    let grid = Array2::from_shape_fn((image_height / f, image_width / f), |(r, c)| {
        let any = (0..f).any(|dy| (0..f).any(|dx| gray.get_pixel((c * f + dx) as u32, (r * f + dy) as u32)[0] != 0));
        if any {
            1.0
        } else {
            0.0
        }
    });
    EditMask::new(grid)
}

/// Mask PNG with editable cells at 255, upsampled to image resolution.
pub fn encode_mask_png(mask: &EditMask, downsample: usize) -> Vec<u8> {
    let f = downsample.max(1);
    let (h, w) = mask.dims();
    let gray = GrayImage::from_fn((w * f) as u32, (h * f) as u32, |x, y| {
        let v = mask.values()[[y as usize / f, x as usize / f]];
        image::Luma([if v > 0.0 { 255 } else { 0 }])
    });
    let mut out = Vec::new();
    gray.write_to(&mut Cursor::new(&mut out), ImageFormat::Png)
        .expect("in-memory PNG encoding cannot fail");
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PointSpace {
    /// Pixel coordinates of the input image.
    #[default]
    Image,
    /// Latent-grid coordinates.
    Feature,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointPair {
    pub handle: [f64; 2],
    pub target: [f64; 2],
}

/// `{"pairs":[{"handle":[r,c],"target":[r,c]}],"space":"image"|"feature"}`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointsSpec {
    pub pairs: Vec<PointPair>,
    #[serde(default)]
    pub space: PointSpace,
}

impl PointsSpec {
    /// Points in feature units.
    pub fn to_point_set(&self, downsample: usize) -> Result<PointSet> {
        if self.pairs.is_empty() {
            return Err(DragError::Invalid("points.pairs must not be empty".into()));
        }
        let scale = match self.space {
            PointSpace::Image => 1.0 / downsample.max(1) as f64,
            PointSpace::Feature => 1.0,
        };
        let pairs: Vec<(Point, Point)> = self
            .pairs
            .iter()
            .map(|p| {
                (
                    Point::new(p.handle[0] * scale, p.handle[1] * scale),
                    Point::new(p.target[0] * scale, p.target[1] * scale),
                )
            })
            .collect();
        PointSet::new(&pairs)
    }

    pub fn from_point_set(points: &PointSet) -> Self {
        Self {
            pairs: points
                .initial_handles()
                .iter()
                .zip(points.targets())
                .map(|(h, g)| PointPair {
                    handle: [h.row, h.col],
                    target: [g.row, g.col],
                })
                .collect(),
            space: PointSpace::Feature,
        }
    }
}

/// Partial config; missing fields take the chosen method's published
/// defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigOverrides {
    pub method: Option<Method>,
    pub timestep: Option<usize>,
    pub max_iters: Option<usize>,
    pub region_radius_ms: Option<usize>,
    pub region_radius_pt: Option<usize>,
    pub lr_latent: Option<f64>,
    pub lr_text: Option<f64>,
    pub lambda_image: Option<f64>,
    pub lambda_text: Option<f64>,
    pub unet_block: Option<u8>,
    pub reach_tolerance: Option<f64>,
    pub text_optimization: Option<bool>,
    pub gooddrag_b: Option<usize>,
    pub drag_steps_per_tracking: Option<usize>,
}

impl ConfigOverrides {
    pub fn resolve(&self) -> DragConfig {
        let mut cfg = DragConfig::for_method(self.method.unwrap_or(Method::DragDiffusion));
        macro_rules! set {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field { cfg.$field = v; })*
            };
        }
        set!(
            timestep,
            max_iters,
            region_radius_ms,
            region_radius_pt,
            lr_latent,
            lr_text,
            lambda_image,
            lambda_text,
            unet_block,
            reach_tolerance,
            text_optimization
        );
        if let Some(b) = self.gooddrag_b {
            cfg.variant.gooddrag_b = b;
        }
        if let Some(n) = self.drag_steps_per_tracking {
            cfg.variant.drag_steps_per_tracking = n;
        }
        cfg
    }
}

/// Validated session inputs built from the external formats.
pub fn prepare_inputs(
    backend: &dyn DiffusionBackend,
    image: ImageTensor,
    mask_png: &[u8],
    points: &PointsSpec,
    config: DragConfig,
) -> Result<SessionInputs> {
    let f = backend.info().latent_downsample_factor;
    let mask = decode_mask(mask_png, image.height(), image.width(), f)?;
    let points = points.to_point_set(f)?;
    validate_session_inputs(image, mask, points, config, f)
}

/// Everything a finished run produces.
#[derive(Debug, Clone)]
pub struct SessionResult {
    pub outcome: DragOutcome,
    pub metrics: MetricsReport,
}

impl SessionResult {
    /// Trajectory log as JSON lines.
    pub fn trajectory_jsonl(&self) -> String {
        let mut out = String::new();
        for record in &self.outcome.log {
            out.push_str(&serde_json::to_string(record).expect("records serialize"));
            out.push('\n');
        }
        out
    }
}

/// Serialised outputs of a finished run. Every front end writes these same
/// bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct RunFiles {
    pub image_png: Vec<u8>,
    pub trajectory_jsonl: Vec<u8>,
    pub metrics_json: Vec<u8>,
    pub endpoints_json: Vec<u8>,
}

impl SessionResult {
    pub fn files(&self) -> Result<RunFiles> {
        Ok(RunFiles {
            image_png: encode_png(&self.outcome.image),
            trajectory_jsonl: self.trajectory_jsonl().into_bytes(),
            metrics_json: serde_json::to_vec_pretty(&self.metrics)?,
            endpoints_json: serde_json::to_vec(&self.outcome.endpoints)?,
        })
    }
}

/// Runs a drag and scores the result against the source image.
pub fn run_session(
    backend: &dyn DiffusionBackend,
    inputs: &SessionInputs,
    text: &TextEmbedding,
    observer: &mut dyn DragObserver,
) -> Result<SessionResult> {
    let outcome = run_drag(backend, inputs, text, observer)?;
    let metrics = MetricsReport::compute(backend, &MeanAbsProxy, &inputs.image, &outcome.image, &inputs.points, text)?;
    Ok(SessionResult { outcome, metrics })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn points_schema_parses_and_defaults_to_image_space() {
        let spec: PointsSpec = serde_json::from_str(r#"{"pairs":[{"handle":[16,8],"target":[24,8]}]}"#).unwrap();
        assert_eq!(spec.space, PointSpace::Image);
        let pts = spec.to_point_set(8).unwrap();
        assert_eq!(pts.handles()[0], Point::new(2.0, 1.0));
        assert_eq!(pts.targets()[0], Point::new(3.0, 1.0));
        assert!(serde_json::from_str::<PointsSpec>(r#"{"pairs":[],"space":"pixels"}"#).is_err());
    }

    #[test]
    fn overrides_fill_published_defaults() {
        let o: ConfigOverrides = serde_json::from_str(r#"{"method":"gooddrag","lambda_text":1.0}"#).unwrap();
        let cfg = o.resolve();
        let mut expected = DragConfig::for_method(Method::GoodDrag);
        expected.lambda_text = 1.0;
        assert_eq!(cfg, expected);
        assert!(serde_json::from_str::<ConfigOverrides>(r#"{"lambda":1.0}"#).is_err());
    }

    #[test]
    fn png_round_trip_is_lossless_on_8bit_values() {
        let data = Array3::from_shape_fn((3, 5, 7), |(c, y, x)| ((c * 40 + y * 9 + x * 3) % 256) as f64 / 255.0);
        let img = ImageTensor::new(data).unwrap();
        let back = decode_image(&encode_png(&img)).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn mask_png_round_trip_and_pooling() {
        let mask = EditMask::new(Array2::from_shape_fn((3, 4), |(r, c)| if r == 1 && c > 1 { 1.0 } else { 0.0 })).unwrap();
        let png = encode_mask_png(&mask, 2);
        assert_eq!(decode_mask(&png, 6, 8, 2).unwrap(), mask);
        assert!(matches!(decode_mask(&png, 6, 6, 2), Err(DragError::ResolutionMismatch(_))));
    }

    #[test]
    fn corrupt_bytes_are_rejected() {
        assert!(decode_image(b"not an image").is_err());
    }
}
