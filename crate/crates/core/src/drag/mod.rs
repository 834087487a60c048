//! The joint drag loop: motion supervision on the latent, text optimisation
//! on the embedding, then point tracking, repeated until every handle reaches
//! its target or the iteration budget runs out.

mod engine;
pub mod geometry;
pub mod loss;
pub mod tracking;

pub use engine::{
    dragdiffusion_terms, run_drag, synthesize, CachedOriginal, DragLoop, DragObserver, DragOutcome, DragState,
    Endpoints, IterationRecord, LossBreakdown, NullObserver,
};
