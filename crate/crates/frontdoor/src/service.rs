//! Local HTTP session service.
//!
//! A session holds the remap-independent pipeline state for one image pair,
//! so a remap only reruns matching and assembly. Sessions live in memory and
//! the least recently used one is dropped once the cap is reached. Remaps on
//! the same session are serialized; different sessions proceed in parallel.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Multipart, Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::Serialize;
use serde_json::json;
use tower_http::services::ServeDir;

use semcolor_core::metrics::LossReport;
use semcolor_core::pipeline::{
    prepare, Inputs, PipelineConfig, Prepared, Rendered, RunMetadata, Source,
};
use semcolor_core::segmentation::RemapSpec;
use semcolor_core::tensor_io::{decode_image, encode_png, RgbImage};
use semcolor_core::Error;

use crate::visual::{heatmap_png, legend, LabelGrid, LegendEntry};

pub const DEFAULT_MAX_SESSIONS: usize = 16;
pub const MAX_SIDE: usize = 2048;
const BODY_LIMIT: usize = 64 * 1024 * 1024;

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, message)
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::Parameter(_) | Error::Data(_) => StatusCode::UNPROCESSABLE_ENTITY,
            Error::Image(_) | Error::Format(_) | Error::Length { .. } | Error::Unsupported(_) => {
                StatusCode::BAD_REQUEST
            }
            Error::Read { .. } | Error::Write { .. } => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

struct Session {
    prepared: Prepared,
    /// Latest render; the async mutex serializes remaps on this session.
    current: tokio::sync::Mutex<Arc<Rendered>>,
}

#[derive(Default)]
struct Store {
    tick: u64,
    sessions: HashMap<String, (u64, Arc<Session>)>,
}

pub struct AppState {
    store: Mutex<Store>,
    max_sessions: usize,
}

impl AppState {
    pub fn new(max_sessions: usize) -> Self {
        AppState {
            store: Mutex::new(Store::default()),
            max_sessions: max_sessions.max(1),
        }
    }

    fn get(&self, id: &str) -> Option<Arc<Session>> {
        let mut store = self.store.lock().expect("session store poisoned");
        store.tick += 1;
        let tick = store.tick;
        store.sessions.get_mut(id).map(|(used, s)| {
            *used = tick;
            s.clone()
        })
    }

    fn insert(&self, id: String, session: Arc<Session>) {
        let mut store = self.store.lock().expect("session store poisoned");
        store.tick += 1;
        let tick = store.tick;
        store.sessions.insert(id, (tick, session));
        while store.sessions.len() > self.max_sessions {
            let oldest = store
                .sessions
                .iter()
                .min_by_key(|(_, (t, _))| *t)
                .map(|(k, _)| k.clone());
            if let Some(k) = oldest {
                log::info!("evicting session {k}");
                store.sessions.remove(&k);
            }
        }
    }

    fn remove(&self, id: &str) -> bool {
        self.store
            .lock()
            .expect("session store poisoned")
            .sessions
            .remove(id)
            .is_some()
    }

    pub fn len(&self) -> usize {
        self.store
            .lock()
            .expect("session store poisoned")
            .sessions
            .len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Response body shared by session creation and remap.
#[derive(Debug, Serialize)]
pub struct SessionView {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub k: usize,
    pub labels_target: LabelGrid,
    pub labels_reference: LabelGrid,
    pub legend: Vec<LegendEntry>,
    pub preview_png_b64: String,
    pub similarity_png_b64: String,
    pub stats: LossReport,
    pub metadata: RunMetadata,
}

fn view(id: Option<String>, prepared: &Prepared, r: &Rendered) -> ApiResult<SessionView> {
    let stride = prepared.config().stride;
    Ok(SessionView {
        id,
        k: prepared.classes(),
        labels_target: LabelGrid::new(&r.target_classes, stride),
        labels_reference: LabelGrid::new(&r.reference_classes, stride),
        legend: legend(&r.target_classes, &r.reference_classes),
        preview_png_b64: B64.encode(encode_png(&r.rgb)?),
        similarity_png_b64: B64.encode(heatmap_png(&r.similarity)?),
        stats: r.losses,
        metadata: prepared.metadata(r),
    })
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> ApiResult<T> + Send + 'static,
) -> ApiResult<T> {
    tokio::task::spawn_blocking(f).await.map_err(|e| {
        ApiError::new(
            StatusCode::INTERNAL_SERVER_ERROR,
            format!("worker failed: {e}"),
        )
    })?
}

fn decode_side(name: &str, bytes: &[u8]) -> ApiResult<RgbImage> {
    let img = decode_image(bytes).map_err(|e| ApiError::bad_request(format!("{name}: {e}")))?;
    if img.width() > MAX_SIDE || img.height() > MAX_SIDE {
        return Err(ApiError::new(
            StatusCode::PAYLOAD_TOO_LARGE,
            format!(
                "{name} is {}x{}; sides are limited to {MAX_SIDE} px",
                img.width(),
                img.height()
            ),
        ));
    }
    Ok(img)
}

async fn create_session(
    State(state): State<Arc<AppState>>,
    mut form: Multipart,
) -> ApiResult<Json<SessionView>> {
    let (mut target, mut reference, mut config): (Option<Bytes>, Option<Bytes>, Option<Bytes>) =
        (None, None, None);
    while let Some(field) = form
        .next_field()
        .await
        .map_err(|e| ApiError::bad_request(e.to_string()))?
    {
        let name = field.name().unwrap_or_default().to_string();
        let data = field
            .bytes()
            .await
            .map_err(|e| ApiError::bad_request(e.to_string()))?;
        match name.as_str() {
            "target" => target = Some(data),
            "reference" => reference = Some(data),
            "config" => config = Some(data),
            other => return Err(ApiError::bad_request(format!("unexpected field {other:?}"))),
        }
    }
    let target = target.ok_or_else(|| ApiError::bad_request("missing field \"target\""))?;
    let reference =
        reference.ok_or_else(|| ApiError::bad_request("missing field \"reference\""))?;
    let config: PipelineConfig = match config {
        Some(c) if !c.is_empty() => {
            serde_json::from_slice(&c).map_err(|e| ApiError::bad_request(format!("config: {e}")))?
        }
        _ => PipelineConfig::default(),
    };
    if config.feature_source != Source::Builtin || config.class_source != Source::Builtin {
        return Err(ApiError::bad_request(
            "sessions only support built-in features and classes",
        ));
    }
    config.validate()?;

    let (prepared, rendered) = blocking(move || {
        let inputs = Inputs::builtin(
            decode_side("target", &target)?,
            decode_side("reference", &reference)?,
        );
        let prepared = prepare(&inputs, &config)?;
        config.remap.validate(prepared.classes())?;
        let rendered = prepared.render(&config.remap)?;
        Ok((prepared, rendered))
    })
    .await?;

    let id = uuid::Uuid::new_v4().simple().to_string();
    let body = view(Some(id.clone()), &prepared, &rendered)?;
    let session = Arc::new(Session {
        prepared,
        current: tokio::sync::Mutex::new(Arc::new(rendered)),
    });
    state.insert(id.clone(), session);
    log::info!("created session {id}");
    Ok(Json(body))
}

fn lookup(state: &AppState, id: &str) -> ApiResult<Arc<Session>> {
    state
        .get(id)
        .ok_or_else(|| ApiError::not_found(format!("unknown session {id}")))
}

async fn update_remap(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Json<SessionView>> {
    let session = lookup(&state, &id)?;
    let remap: RemapSpec =
        serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(format!("remap: {e}")))?;
    remap.validate(session.prepared.classes())?;

    let mut current = session.current.lock().await;
    let worker = session.clone();
    let rendered = blocking(move || Ok(worker.prepared.render(&remap)?)).await?;
    let body = view(None, &session.prepared, &rendered)?;
    *current = Arc::new(rendered);
    Ok(Json(body))
}

async fn artifact(
    State(state): State<Arc<AppState>>,
    Path((id, name)): Path<(String, String)>,
) -> ApiResult<Response> {
    let session = lookup(&state, &id)?;
    let rendered = session.current.lock().await.clone();
    let name = name.strip_suffix(".sptn").unwrap_or(&name);
    let tensor = rendered
        .artifact(name)
        .ok_or_else(|| ApiError::not_found(format!("unknown artifact {name:?}")))?;
    Ok((
        [(header::CONTENT_TYPE, "application/octet-stream")],
        tensor.to_bytes(),
    )
        .into_response())
}

async fn delete_session(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> ApiResult<StatusCode> {
    if state.remove(&id) {
        Ok(StatusCode::NO_CONTENT)
    } else {
        Err(ApiError::not_found(format!("unknown session {id}")))
    }
}

pub fn router(state: Arc<AppState>, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/session", post(create_session))
        .route("/api/session/{id}", delete(delete_session))
        .route("/api/session/{id}/remap", post(update_remap))
        .route("/api/session/{id}/artifact/{name}", get(artifact))
        .layer(DefaultBodyLimit::max(BODY_LIMIT))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}
