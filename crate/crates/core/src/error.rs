use thiserror::Error;

/// Errors raised anywhere in the engine.
#[derive(Debug, Error)]
pub enum DragError {
    #[error("point {index} {role} at ({row}, {col}) lies outside the {height}x{width} grid")]
    OutOfBoundsPoint {
        index: usize,
        role: &'static str,
        row: f64,
        col: f64,
        height: usize,
        width: usize,
    },
    #[error("image {width}x{height} exceeds the {limit}x{limit} limit")]
    TooLarge { width: u32, height: u32, limit: u32 },
    #[error("edit mask has no editable entries")]
    EmptyMask,
    #[error("bad config `{field}`: {reason}")]
    BadConfig { field: &'static str, reason: String },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("timestep error: {0}")]
    Timestep(String),
    #[error("feature block {0} is not in 1..=4")]
    BadBlock(u8),
    #[error("no active points left to supervise")]
    NoActivePoints,
    #[error("backend does not support {0}")]
    BackendCapability(String),
    #[error("initial handle-target distances sum to zero")]
    ZeroInitialDistance,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("resolution mismatch: {0}")]
    ResolutionMismatch(String),
    #[error("position ({0}, {1}) is outside the sampling bounds")]
    OutOfBounds(f64, f64),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("unknown backend selection {0:?}")]
    UnknownBackend(String),
    #[error("run cancelled")]
    Cancelled,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Coarse grouping used by front ends to pick exit codes and HTTP statuses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Validation,
    Backend,
    Cancelled,
    Io,
}

impl DragError {
    pub fn class(&self) -> ErrorClass {
        use DragError::*;
        match self {
            OutOfBoundsPoint { .. } | TooLarge { .. } | EmptyMask | BadConfig { .. } | Shape(_) | BadBlock(_)
            | ZeroInitialDistance | ShapeMismatch(_) | ResolutionMismatch(_) | OutOfBounds(..)
            | Invalid(_) | Json(_) | Image(_) => ErrorClass::Validation,
            Timestep(_) | NoActivePoints | BackendCapability(_) | UnknownBackend(_) => {
                ErrorClass::Backend
            }
            Cancelled => ErrorClass::Cancelled,
            Io(_) => ErrorClass::Io,
        }
    }

    pub fn bad_config(field: &'static str, reason: impl Into<String>) -> Self {
        Self::BadConfig {
            field,
            reason: reason.into(),
        }
    }

    /// Dotted path of the offending input field, when one can be named.
    pub fn field_path(&self) -> Option<String> {
        match self {
            Self::OutOfBoundsPoint { index, role, .. } => Some(format!("points.pairs[{index}].{role}")),
            Self::BadConfig { field, .. } => Some(format!("config.{field}")),
            Self::EmptyMask => Some("mask".into()),
            Self::BadBlock(_) => Some("config.unet_block".into()),
            Self::ZeroInitialDistance => Some("points".into()),
            _ => None,
        }
    }
}

pub type Result<T, E = DragError> = std::result::Result<T, E>;
