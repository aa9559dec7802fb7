//! Session-based HTTP/JSON inference service.
//!
//! Routes:
//! - `POST /sessions` — body is a PNG (`Content-Type: image/png`) or JSON
//!   `{"image_png_base64": "..."}`; answers 201 with the session summary.
//! - `POST /sessions/{id}/targets/{t}/auto` — automatic mask.
//! - `POST /sessions/{id}/targets/{t}/clicks` — `{"x", "y", "polarity", "mode"?}`.
//! - `POST /sessions/{id}/targets/{t}/undo`
//! - `GET /sessions/{id}` — full state; `DELETE /sessions/{id}`.
//! - `GET /targets` — model vocabulary.
//!
//! Mask routes accept `?png=true` to add a base64 PNG of the mask.
//!
//! One request per session runs at a time; a concurrent request to a busy
//! session is rejected with 409 `busy` rather than queued.

#[cfg(feature = "mimalloc")]
#[global_allocator]
static ALLOC: mimalloc::MiMalloc = mimalloc::MiMalloc;

pub mod error;
pub mod session;

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, TryLockError};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use verse_core::clicks::Polarity;
use verse_core::dataio::encode_labels;
use verse_core::{Mode, Verse32};

pub use error::{ApiError, TargetName};
pub use session::{Limits, Session, SessionView, TargetView};

/// Environment variable naming the checkpoint the service loads.
pub const CHECKPOINT_ENV: &str = "VERSE_CHECKPOINT";

/// Request bodies above this size are refused.
pub const MAX_BODY_BYTES: usize = 32 * 1024 * 1024;

pub struct AppState {
    model: Arc<Verse32>,
    names: BTreeMap<usize, String>,
    limits: Limits,
    sessions: Mutex<HashMap<String, Arc<Mutex<Session>>>>,
    next_id: AtomicU64,
}

impl AppState {
    pub fn new(model: Verse32, names: BTreeMap<usize, String>) -> Self {
        Self::with_limits(model, names, Limits::default())
    }

    pub fn with_limits(model: Verse32, mut names: BTreeMap<usize, String>, limits: Limits) -> Self {
        for t in 0..model.num_targets() {
            names.entry(t).or_insert_with(|| format!("target{t}"));
        }
        names.retain(|&t, _| t < model.num_targets());
        Self { model: Arc::new(model), names, limits, sessions: Mutex::new(HashMap::new()), next_id: AtomicU64::new(1) }
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>, ApiError> {
        self.sessions.lock().expect("session table").get(id).cloned().ok_or_else(|| ApiError::session_not_found(id))
    }
}

pub type SharedState = Arc<AppState>;

pub fn router(state: SharedState) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_state).delete(delete_session))
        .route("/sessions/{id}/targets/{t}/auto", post(auto_segment))
        .route("/sessions/{id}/targets/{t}/clicks", post(add_click))
        .route("/sessions/{id}/targets/{t}/undo", post(undo))
        .route("/targets", get(targets))
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
        .with_state(state)
}

pub async fn serve(listener: tokio::net::TcpListener, state: SharedState) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

#[derive(Serialize, Deserialize)]
pub struct CreateRequest {
    pub image_png_base64: String,
}

#[derive(Serialize, Deserialize, Debug, PartialEq)]
pub struct CreatedSession {
    pub session_id: String,
    pub height: usize,
    pub width: usize,
    pub original_height: usize,
    pub original_width: usize,
    /// Working size over original size (rows, columns).
    pub scale: (f64, f64),
    pub conversion: Option<String>,
    pub vocabulary: Vec<TargetName>,
}

#[derive(Serialize, Deserialize, Debug, Clone)]
pub struct ClickRequest {
    /// Column in original image coordinates.
    pub x: f64,
    /// Row in original image coordinates.
    pub y: f64,
    pub polarity: Polarity,
    /// Explicit mode (2 or 3) for the first click of a target.
    #[serde(default)]
    pub mode: Option<Mode>,
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct MaskPayload {
    pub session_id: String,
    #[serde(flatten)]
    pub target: TargetView,
    pub height: usize,
    pub width: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub png_base64: Option<String>,
    /// Set by undo: `true` when there was nothing to undo.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub noop: Option<bool>,
}

#[derive(Deserialize, Default)]
pub struct MaskQuery {
    #[serde(default)]
    png: bool,
}

fn vocabulary(state: &AppState) -> Vec<TargetName> {
    state.names.iter().map(|(&id, n)| TargetName { id, name: n.clone() }).collect()
}

/// Runs `f` on the locked session in the blocking pool.
async fn with_session<R: Send + 'static>(
    state: &SharedState,
    id: &str,
    f: impl FnOnce(&AppState, &mut Session) -> Result<R, ApiError> + Send + 'static,
) -> Result<R, ApiError> {
    let session = state.session(id)?;
    let state = state.clone();
    let id = id.to_string();
    tokio::task::spawn_blocking(move || {
        let mut guard = match session.try_lock() {
            Ok(g) => g,
            Err(TryLockError::WouldBlock) => return Err(ApiError::busy(&id)),
            Err(TryLockError::Poisoned(p)) => p.into_inner(),
        };
        f(&state, &mut guard)
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
}

fn payload(s: &Session, target: usize, png: bool, noop: Option<bool>) -> Result<MaskPayload, ApiError> {
    let (height, width) = s.hw();
    let view = match s.target_view(target) {
        Some(v) => v,
        None => session::view(
            target,
            &session::TargetState {
                lineage: session::Lineage::Interactive,
                clicks: Default::default(),
                probs: verse_core::tensor::Tensor::zeros(&[height, width]),
            },
        ),
    };
    let png_base64 = if png {
        let mask = view.rle.decode()?;
        let bytes = encode_labels(height, width, &BTreeMap::from([(0, mask)]))?;
        Some(base64::engine::general_purpose::STANDARD.encode(bytes))
    } else {
        None
    };
    Ok(MaskPayload { session_id: s.id.clone(), target: view, height, width, png_base64, noop })
}

async fn create_session(State(state): State<SharedState>, headers: HeaderMap, body: Bytes) -> Result<(StatusCode, Json<CreatedSession>), ApiError> {
    let is_png = headers.get(header::CONTENT_TYPE).and_then(|v| v.to_str().ok()).is_some_and(|v| v.starts_with("image/png"));
    let png = if is_png {
        body.to_vec()
    } else {
        let req: CreateRequest = serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(format!("expected a PNG body or {{\"image_png_base64\"}}: {e}")))?;
        base64::engine::general_purpose::STANDARD.decode(req.image_png_base64.trim()).map_err(|e| ApiError::bad_image(format!("base64: {e}")))?
    };
    let st = state.clone();
    let session = tokio::task::spawn_blocking(move || {
        let prepared = session::prepare_image(&png, &st.limits)?;
        let id = format!("s{}", st.next_id.fetch_add(1, Ordering::Relaxed));
        Session::new(id, &st.model, prepared)
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))??;
    let (height, width) = session.hw();
    let created = CreatedSession {
        session_id: session.id.clone(),
        height,
        width,
        original_height: session.original.0,
        original_width: session.original.1,
        scale: session.scale,
        conversion: session.conversion.clone(),
        vocabulary: vocabulary(&state),
    };
    tracing::info!(session = %created.session_id, height, width, "session created");
    state.sessions.lock().expect("session table").insert(session.id.clone(), Arc::new(Mutex::new(session)));
    Ok((StatusCode::CREATED, Json(created)))
}

async fn get_state(State(state): State<SharedState>, Path(id): Path<String>) -> Result<Json<SessionView>, ApiError> {
    with_session(&state, &id, |_, s| Ok(s.view())).await.map(Json)
}

async fn delete_session(State(state): State<SharedState>, Path(id): Path<String>) -> Result<StatusCode, ApiError> {
    match state.sessions.lock().expect("session table").remove(&id) {
        Some(_) => Ok(StatusCode::NO_CONTENT),
        None => Err(ApiError::session_not_found(&id)),
    }
}

async fn targets(State(state): State<SharedState>) -> Json<Vec<TargetName>> {
    Json(vocabulary(&state))
}

async fn auto_segment(State(state): State<SharedState>, Path((id, t)): Path<(String, usize)>, Query(q): Query<MaskQuery>) -> Result<Json<MaskPayload>, ApiError> {
    with_session(&state, &id, move |st, s| {
        s.auto_segment(&st.model, t, &st.names)?;
        payload(s, t, q.png, None)
    })
    .await
    .map(Json)
}

async fn add_click(
    State(state): State<SharedState>,
    Path((id, t)): Path<(String, usize)>,
    Query(q): Query<MaskQuery>,
    body: Bytes,
) -> Result<Json<MaskPayload>, ApiError> {
    let req: ClickRequest = serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(format!("click body: {e}")))?;
    with_session(&state, &id, move |st, s| {
        s.add_click(&st.model, t, &st.names, req.x, req.y, req.polarity, req.mode)?;
        payload(s, t, q.png, None)
    })
    .await
    .map(Json)
}

async fn undo(State(state): State<SharedState>, Path((id, t)): Path<(String, usize)>, Query(q): Query<MaskQuery>) -> Result<Json<MaskPayload>, ApiError> {
    with_session(&state, &id, move |st, s| {
        let (changed, _) = s.undo(&st.model, t, &st.names)?;
        payload(s, t, q.png, Some(!changed))
    })
    .await
    .map(Json)
}
