//! Session records, the event log, and the blocking drag worker.

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};

use dragtext_core::backend::DiffusionBackend;
use dragtext_core::drag::{synthesize, DragObserver, DragState, Endpoints, IterationRecord};
use dragtext_core::io::{encode_png, run_session, PointsSpec};
use dragtext_core::metrics::MetricsReport;
use dragtext_core::{DragConfig, DragError, ImageTensor, SessionInputs, TextEmbedding};
use serde::Serialize;
use serde_json::{json, Value};
use tokio::sync::watch;

use crate::artifacts::ArtifactStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    New,
    Running,
    Done,
    Failed,
    Cancelled,
}

impl Status {
    pub fn is_terminal(self) -> bool {
        matches!(self, Self::Done | Self::Failed | Self::Cancelled)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ResultRefs {
    pub image: String,
    pub trajectory: String,
    pub metrics: String,
    pub endpoints: String,
}

/// Mutable part of a session.
#[derive(Debug)]
pub struct SessionData {
    pub status: Status,
    pub inputs: Option<SessionInputs>,
    pub mask_ref: Option<String>,
    pub points: Option<PointsSpec>,
    pub config: Option<DragConfig>,
    /// Append-only; entry `i` carries SSE id `i`.
    pub events: Vec<Value>,
    pub result: Option<ResultRefs>,
    pub metrics: Option<MetricsReport>,
    pub endpoints: Option<Endpoints>,
    pub error: Option<String>,
    /// Interpolation renders keyed by the bits of omega.
    pub interpolations: HashMap<u64, String>,
}

#[derive(Debug)]
pub struct Session {
    pub id: String,
    pub prompt: String,
    pub text: TextEmbedding,
    pub image: ImageTensor,
    pub image_ref: String,
    pub cancel: AtomicBool,
    data: Mutex<SessionData>,
    events_tx: watch::Sender<usize>,
}

impl Session {
    pub fn new(id: String, prompt: String, text: TextEmbedding, image: ImageTensor, image_ref: String) -> Self {
        Self {
            id,
            prompt,
            text,
            image,
            image_ref,
            cancel: AtomicBool::new(false),
            data: Mutex::new(SessionData {
                status: Status::New,
                inputs: None,
                mask_ref: None,
                points: None,
                config: None,
                events: Vec::new(),
                result: None,
                metrics: None,
                endpoints: None,
                error: None,
                interpolations: HashMap::new(),
            }),
            events_tx: watch::channel(0).0,
        }
    }

    pub fn data(&self) -> MutexGuard<'_, SessionData> {
        self.data.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
    }

    pub fn subscribe(&self) -> watch::Receiver<usize> {
        self.events_tx.subscribe()
    }

    fn push_event(&self, event: Value) {
        let len = {
            let mut data = self.data();
            data.events.push(event);
            data.events.len()
        };
        self.events_tx.send_replace(len);
    }

    /// Public JSON view.
    pub fn record(&self) -> Value {
        let data = self.data();
        json!({
            "id": self.id,
            "status": data.status,
            "prompt": self.prompt,
            "empty_prompt": self.prompt.trim().is_empty(),
            "semantic_len": self.text.semantic_len(),
            "image": self.image_ref,
            "height": self.image.height(),
            "width": self.image.width(),
            "mask": data.mask_ref,
            "points": data.points,
            "config": data.config,
            "events": data.events.len(),
            "result": data.result,
            "metrics": data.metrics,
            "error": data.error,
        })
    }
}

struct EventSink<'a> {
    session: &'a Session,
    backend: &'a dyn DiffusionBackend,
    artifacts: &'a ArtifactStore,
    preview_every: usize,
}

impl DragObserver for EventSink<'_> {
    fn on_iteration(&mut self, record: &IterationRecord, state: &DragState) {
        let mut event = serde_json::to_value(record).expect("records serialize");
        event["type"] = json!("iteration");
        let preview = if (record.k + 1).is_multiple_of(self.preview_every) {
            synthesize(self.backend, &state.latent, &state.text, state.bottleneck.as_ref())
                .ok()
                .and_then(|img| self.artifacts.put(&encode_png(&img), "png").ok())
        } else {
            None
        };
        event["preview"] = json!(preview);
        self.session.push_event(event);
    }

    fn cancelled(&self) -> bool {
        self.session.cancel.load(Ordering::SeqCst)
    }
}

/// Runs the session's drag to completion on the calling thread.
pub fn execute(session: &Arc<Session>, backend: &dyn DiffusionBackend, artifacts: &ArtifactStore, preview_every: usize) {
    let inputs = session.data().inputs.clone().expect("run is only started with inputs set");
    let mut sink = EventSink {
        session,
        backend,
        artifacts,
        preview_every,
    };
    let outcome = run_session(backend, &inputs, &session.text, &mut sink).and_then(|result| {
        let store = |bytes: &[u8], ext: &str| artifacts.put(bytes, ext).map_err(DragError::from);
        let files = result.files()?;
        let refs = ResultRefs {
            image: store(&files.image_png, "png")?,
            trajectory: store(&files.trajectory_jsonl, "jsonl")?,
            metrics: store(&files.metrics_json, "json")?,
            endpoints: store(&files.endpoints_json, "json")?,
        };
        Ok((result, refs))
    });
    match outcome {
        Ok((result, refs)) => {
            let terminal = json!({
                "type": "done",
                "result": refs,
                "metrics": result.metrics,
            });
            {
                let mut data = session.data();
                data.status = Status::Done;
                data.result = Some(refs);
                data.metrics = Some(result.metrics);
                data.endpoints = Some(result.outcome.endpoints);
            }
            session.push_event(terminal);
        }
        Err(DragError::Cancelled) => {
            session.data().status = Status::Cancelled;
            session.push_event(json!({"type": "cancelled"}));
        }
        Err(e) => {
            let message = e.to_string();
            {
                let mut data = session.data();
                data.status = Status::Failed;
                data.error = Some(message.clone());
            }
            session.push_event(json!({"type": "failed", "error": message}));
        }
    }
}
