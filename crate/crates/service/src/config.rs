use std::path::PathBuf;

use dragtext_core::backend::BackendSelection;

/// Service settings, normally read from the environment.
#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub backend: BackendSelection,
    pub seed: u64,
    pub data_dir: PathBuf,
    /// Concurrent drag runs.
    pub workers: usize,
    /// A preview image is attached to every `preview_every`-th iteration event.
    pub preview_every: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            backend: BackendSelection::Toy,
            seed: 0,
            data_dir: PathBuf::from("dragtext-data"),
            workers: 2,
            preview_every: 10,
        }
    }
}

impl ServiceConfig {
    /// Reads `DRAGTEXT_BACKEND`, `DRAGTEXT_DATA_DIR`, `DRAGTEXT_SEED`,
    /// `DRAGTEXT_WORKERS` and `DRAGTEXT_PREVIEW_EVERY`.
    pub fn from_env() -> Result<Self, String> {
        let mut cfg = Self::default();
        if let Ok(v) = std::env::var("DRAGTEXT_BACKEND") {
            cfg.backend = v.parse().map_err(|e| format!("DRAGTEXT_BACKEND: {e}"))?;
        }
        if let Ok(v) = std::env::var("DRAGTEXT_DATA_DIR") {
            cfg.data_dir = PathBuf::from(v);
        }
        if let Ok(v) = std::env::var("DRAGTEXT_SEED") {
            cfg.seed = v.parse().map_err(|e| format!("DRAGTEXT_SEED: {e}"))?;
        }
        if let Ok(v) = std::env::var("DRAGTEXT_WORKERS") {
            cfg.workers = v.parse().map_err(|e| format!("DRAGTEXT_WORKERS: {e}"))?;
        }
        if let Ok(v) = std::env::var("DRAGTEXT_PREVIEW_EVERY") {
            cfg.preview_every = v.parse().map_err(|e| format!("DRAGTEXT_PREVIEW_EVERY: {e}"))?;
        }
        if cfg.workers == 0 || cfg.preview_every == 0 {
            return Err("DRAGTEXT_WORKERS and DRAGTEXT_PREVIEW_EVERY must be positive".into());
        }
        Ok(cfg)
    }
}
