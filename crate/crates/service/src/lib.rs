//! HTTP session service for drag editing.
//!
//! Clients create a session from an image and prompt, attach a mask, points
//! and config overrides, start a run and follow its progress as server-sent
//! events, then fetch results and interpolations. Files are stored
//! content-addressed on local disk.

pub mod artifacts;
pub mod config;
pub mod session;

use std::collections::HashMap;
use std::convert::Infallible;
use std::sync::atomic::Ordering;
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use dragtext_core::backend::{BackendRegistry, DiffusionBackend};
use dragtext_core::embedmanip::render_at;
use dragtext_core::io::{decode_image, encode_png, prepare_inputs, ConfigOverrides, PointsSpec};
use dragtext_core::DragError;
use futures::Stream;
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::sync::Semaphore;

pub use artifacts::ArtifactStore;
pub use config::ServiceConfig;
use session::{Session, Status};

/// Shared service state.
pub struct AppState {
    pub backend: Arc<dyn DiffusionBackend>,
    pub artifacts: ArtifactStore,
    pub preview_every: usize,
    sessions: RwLock<HashMap<String, Arc<Session>>>,
    workers: Arc<Semaphore>,
}

impl AppState {
    pub fn new(config: &ServiceConfig, registry: &BackendRegistry) -> Result<Arc<Self>, DragError> {
        let backend = registry.build(&config.backend, config.seed)?;
        Ok(Arc::new(Self {
            backend,
            artifacts: ArtifactStore::open(&config.data_dir)?,
            preview_every: config.preview_every,
            sessions: RwLock::new(HashMap::new()),
            workers: Arc::new(Semaphore::new(config.workers)),
        }))
    }

    fn session(&self, id: &str) -> Result<Arc<Session>, ApiError> {
        self.sessions
            .read()
            .unwrap_or_else(|p| p.into_inner())
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("no session {id}")))
    }
}

/// Largest request body accepted (base64 images up to 4096x4096).
const BODY_LIMIT: usize = 128 * 1024 * 1024;

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/inputs", post(set_inputs))
        .route("/sessions/{id}/run", post(run))
        .route("/sessions/{id}/cancel", post(cancel))
        .route("/sessions/{id}/events", get(events))
        .route("/sessions/{id}/interpolate", post(interpolate))
        .route("/artifacts/{reference}", get(artifact))
        .layer(DefaultBodyLimit::max(BODY_LIMIT))
        .with_state(state)
}

/// JSON error body `{"error", "message", "field"?}`.
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
    field: Option<String>,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
            field: None,
        }
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "NotFound", message)
    }

    fn wrong_state(message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, "WrongState", message)
    }

    fn validation(message: impl Into<String>, field: Option<String>) -> Self {
        Self {
            field,
            ..Self::new(StatusCode::UNPROCESSABLE_ENTITY, "ValidationFailed", message)
        }
    }

    fn from_validation(err: DragError, default_field: Option<&str>) -> Self {
        let field = err.field_path().or_else(|| default_field.map(str::to_string));
        match err.class() {
            dragtext_core::ErrorClass::Validation => Self::validation(err.to_string(), field),
            _ => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", err.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({"error": self.code, "message": self.message});
        if let Some(f) = self.field {
            body["field"] = json!(f);
        }
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Parses a JSON body, reporting the path of the first bad field.
fn parse_body<T: DeserializeOwned>(body: &[u8]) -> ApiResult<T> {
    let de = &mut serde_json::Deserializer::from_slice(body);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let field = (path != ".").then_some(path);
        let inner = e.into_inner();
        if inner.is_syntax() || inner.is_eof() {
            ApiError::new(StatusCode::BAD_REQUEST, "BadRequest", inner.to_string())
        } else {
            ApiError::validation(inner.to_string(), field)
        }
    })
}

fn decode_base64(data: &str, field: &str) -> ApiResult<Vec<u8>> {
    base64::engine::general_purpose::STANDARD
        .decode(data.trim())
        .map_err(|e| ApiError::validation(format!("{field} is not valid base64: {e}"), Some(field.into())))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateSession {
    /// Base64 PNG or JPEG.
    image: String,
    #[serde(default)]
    prompt: String,
}

async fn create_session(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Response> {
    let req: CreateSession = parse_body(&body)?;
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(req.image.trim())
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "BadImage", format!("image is not valid base64: {e}")))?;
    let image = decode_image(&bytes).map_err(|e| match e {
        DragError::TooLarge { .. } => ApiError::new(StatusCode::PAYLOAD_TOO_LARGE, "TooLarge", e.to_string()),
        other => ApiError::new(StatusCode::BAD_REQUEST, "BadImage", other.to_string()),
    })?;
    let f = state.backend.info().latent_downsample_factor;
    if image.height() % f != 0 || image.width() % f != 0 {
        return Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            "BadImage",
            format!("image sides must be multiples of {f}"),
        ));
    }
    let image_ref = state
        .artifacts
        .put(&bytes, if bytes.starts_with(b"\x89PNG") { "png" } else { "jpg" })
        .or_else(|_| state.artifacts.put(&encode_png(&image), "png"))
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", e.to_string()))?;
    let text = state.backend.encode_text(&req.prompt);
    let id = uuid::Uuid::new_v4().simple().to_string();
    let session = Arc::new(Session::new(id.clone(), req.prompt, text, image, image_ref));
    let record = session.record();
    state.sessions.write().unwrap_or_else(|p| p.into_inner()).insert(id, session);
    Ok((StatusCode::CREATED, Json(record)).into_response())
}

async fn get_session(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    Ok(Json(state.session(&id)?.record()))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SetInputs {
    /// Base64 single-channel PNG at image resolution.
    mask: String,
    points: PointsSpec,
    #[serde(default)]
    config: ConfigOverrides,
}

async fn set_inputs(State(state): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<Value>> {
    let session = state.session(&id)?;
    if session.data().status != Status::New {
        return Err(ApiError::wrong_state("inputs can only be set before a run"));
    }
    let req: SetInputs = parse_body(&body)?;
    let mask_png = decode_base64(&req.mask, "mask")?;
    let config = req.config.resolve();
    let inputs = prepare_inputs(state.backend.as_ref(), session.image.clone(), &mask_png, &req.points, config.clone())
        .map_err(|e| {
            let default = match &e {
                DragError::Image(_) | DragError::ResolutionMismatch(_) | DragError::Shape(_) => Some("mask"),
                DragError::Invalid(_) => Some("points"),
                _ => None,
            };
            ApiError::from_validation(e, default)
        })?;
    let mask_ref = state
        .artifacts
        .put(&mask_png, "png")
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", e.to_string()))?;
    {
        let mut data = session.data();
        if data.status != Status::New {
            return Err(ApiError::wrong_state("inputs can only be set before a run"));
        }
        data.inputs = Some(inputs);
        data.mask_ref = Some(mask_ref);
        data.points = Some(req.points);
        data.config = Some(config);
    }
    Ok(Json(session.record()))
}

async fn run(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let session = state.session(&id)?;
    {
        let mut data = session.data();
        if data.status != Status::New {
            return Err(ApiError::wrong_state(format!("session is {:?}", data.status).to_lowercase()));
        }
        if data.inputs.is_none() {
            return Err(ApiError::wrong_state("set inputs before running"));
        }
        data.status = Status::Running;
    }
    let worker_state = state.clone();
    let worker_session = session.clone();
    tokio::spawn(async move {
        let Ok(permit) = worker_state.workers.clone().acquire_owned().await else {
            return;
        };
        let _ = tokio::task::spawn_blocking(move || {
            session::execute(
                &worker_session,
                worker_state.backend.as_ref(),
                &worker_state.artifacts,
                worker_state.preview_every,
            );
            drop(permit);
        })
        .await;
    });
    Ok((StatusCode::ACCEPTED, Json(session.record())).into_response())
}

async fn cancel(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let session = state.session(&id)?;
    let status = session.data().status;
    match status {
        Status::New => Err(ApiError::wrong_state("session has not started")),
        Status::Running => {
            session.cancel.store(true, Ordering::SeqCst);
            Ok((StatusCode::ACCEPTED, Json(session.record())).into_response())
        }
        _ => Ok(Json(session.record()).into_response()),
    }
}

#[derive(Deserialize)]
struct EventsQuery {
    /// Resume after this event id.
    after: Option<usize>,
}

async fn events(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(query): Query<EventsQuery>,
    headers: HeaderMap,
) -> ApiResult<Sse<impl Stream<Item = Result<Event, Infallible>>>> {
    let session = state.session(&id)?;
    let last_seen = query.after.or_else(|| {
        headers
            .get("last-event-id")
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.parse().ok())
    });
    let start = last_seen.map_or(0, |k| k + 1);
    let rx = session.subscribe();
    let stream = futures::stream::unfold((session, rx, start, false), |(session, mut rx, next, finished)| async move {
        if finished {
            return None;
        }
        loop {
            let pending = {
                let data = session.data();
                data.events.get(next).cloned().map(|e| (e, data.events.len()))
            };
            if let Some((event, _)) = pending {
                let terminal = event["type"] != "iteration";
                let sse = Event::default().id(next.to_string()).json_data(&event).expect("events serialize");
                return Some((Ok(sse), (session, rx, next + 1, terminal)));
            }
            if session.data().status.is_terminal() && session.data().events.len() <= next {
                return None;
            }
            if rx.changed().await.is_err() {
                return None;
            }
        }
    });
    Ok(Sse::new(stream).keep_alive(KeepAlive::default()))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct InterpolateRequest {
    /// Numbers, or strings parsed as floats.
    omegas: Vec<Value>,
}

fn parse_omega(i: usize, v: &Value) -> ApiResult<f64> {
    let field = Some(format!("omegas[{i}]"));
    let w = match v {
        Value::Number(n) => n.as_f64(),
        Value::String(s) => s.trim().parse::<f64>().ok(),
        _ => None,
    }
    .ok_or_else(|| ApiError::validation(format!("omega {v} is not a number"), field.clone()))?;
    if !w.is_finite() {
        return Err(ApiError::validation(format!("omega {v} is not finite"), field));
    }
    Ok(if w == 0.0 { 0.0 } else { w })
}

async fn interpolate(State(state): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<Value>> {
    let session = state.session(&id)?;
    let req: InterpolateRequest = parse_body(&body)?;
    let omegas = req
        .omegas
        .iter()
        .enumerate()
        .map(|(i, v)| parse_omega(i, v))
        .collect::<ApiResult<Vec<f64>>>()?;
    if omegas.is_empty() {
        return Err(ApiError::validation("omegas must not be empty", Some("omegas".into())));
    }
    let endpoints = {
        let data = session.data();
        if data.status != Status::Done {
            return Err(ApiError::wrong_state("interpolation needs a finished run"));
        }
        data.endpoints.clone().expect("done sessions keep endpoints")
    };
    let mut images = Vec::with_capacity(omegas.len());
    for w in omegas {
        let cached = session.data().interpolations.get(&w.to_bits()).cloned();
        let reference = match cached {
            Some(r) => r,
            None => {
                let backend = state.backend.clone();
                let ep = endpoints.clone();
                let image = tokio::task::spawn_blocking(move || render_at(backend.as_ref(), &ep, w))
                    .await
                    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", e.to_string()))?
                    .map_err(|e| ApiError::from_validation(e, Some("omegas")))?;
                let r = state
                    .artifacts
                    .put(&encode_png(&image), "png")
                    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", e.to_string()))?;
                session.data().interpolations.insert(w.to_bits(), r.clone());
                r
            }
        };
        images.push(json!({"omega": w, "image": reference}));
    }
    Ok(Json(json!({"images": images})))
}

async fn artifact(State(state): State<Arc<AppState>>, Path(reference): Path<String>) -> ApiResult<Response> {
    let (bytes, content_type) = state
        .artifacts
        .get(&reference)
        .ok_or_else(|| ApiError::not_found(format!("no artifact {reference}")))?;
    Ok(([(header::CONTENT_TYPE, content_type)], bytes).into_response())
}
