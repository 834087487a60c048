//! Point-based drag editing that jointly optimises a diffusion latent and the
//! prompt's text embedding.
//!
//! Each drag iteration runs motion supervision on the latent, a text
//! optimisation step on the embedding, then nearest-neighbour point tracking.
//! [`backend::ToyBackend`] is a small deterministic diffusion model on which
//! every stage can be verified exactly.

pub mod autodiff;
pub mod backend;
pub mod domain;
pub mod embedmanip;
pub mod drag;
pub mod error;
pub mod io;
pub mod metrics;
pub mod optim;
pub mod scene;
pub mod variants;

pub use domain::{
    validate_session_inputs, DragConfig, EditMask, FeatureMap, ImageTensor, LatentState, Method, Point, PointSet,
    SessionInputs, TextEmbedding, VariantConfig,
};
pub use error::{DragError, ErrorClass, Result};
