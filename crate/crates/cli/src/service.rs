//! HTTP and WebSocket front end for interactive editing sessions.
//!
//! Sessions are independent: each holds its own lock, so requests to one
//! session are serialized while different sessions proceed in parallel.
//! Session ids and projection seeds are sequential, which makes a service run
//! replayable from its request log.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex as StdMutex};

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{FromRequest, FromRequestParts, Path, Query, Request, State};
use axum::http::request::Parts;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use handlefield::autoencoder::{LatentCode, Model};
use handlefield::dataset::{Dataset, DatasetError};
use handlefield::editing::{edit_handles_with, extract_mesh, EditRequest, EditSession, ProjectionConfig, RoundSnapshot};
use handlefield::geometry::{GeometryError, Point3, TriangleMesh};
use handlefield::segmentation::{segment, SegmentationConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use tokio::sync::{broadcast, Mutex};

use crate::commands::check_mesh;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    /// Default marching-cubes resolution for meshes the service returns.
    pub resolution: usize,
    pub level: f64,
    pub max_sessions: usize,
    pub projection: ProjectionConfig,
    pub seed: u64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self { resolution: 96, level: 0.0, max_sessions: 64, projection: ProjectionConfig::default(), seed: 0 }
    }
}

/// Mesh in a form a GPU viewer can upload directly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeshPayload {
    /// Flat `x, y, z` triples.
    pub positions: Vec<f32>,
    pub indices: Vec<u32>,
    /// SHA-256 over the little-endian positions followed by the indices.
    pub hash: String,
}

impl MeshPayload {
    pub fn from_mesh(mesh: &TriangleMesh) -> Self {
        let positions: Vec<f32> = mesh.vertices.iter().flat_map(|v| [v.x as f32, v.y as f32, v.z as f32]).collect();
        let indices: Vec<u32> = mesh.triangles.iter().flatten().copied().collect();
        Self { hash: mesh_hash(&positions, &indices), positions, indices }
    }
}

pub fn mesh_hash(positions: &[f32], indices: &[u32]) -> String {
    let mut h = Sha256::new();
    for p in positions {
        h.update(p.to_le_bytes());
    }
    for i in indices {
        h.update(i.to_le_bytes());
    }
    hex::encode(h.finalize())
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    fn bad_request(code: &'static str, message: impl Into<String>) -> Self {
        Self { status: StatusCode::BAD_REQUEST, code, message: message.into() }
    }

    fn internal(message: impl Into<String>) -> Self {
        Self { status: StatusCode::INTERNAL_SERVER_ERROR, code: "internal", message: message.into() }
    }
}

impl From<handlefield::Error> for ApiError {
    fn from(e: handlefield::Error) -> Self {
        use handlefield::Error as E;
        let message = e.to_string();
        let (status, code) = match &e {
            E::SessionNotFound(_) => (StatusCode::NOT_FOUND, "session_not_found"),
            E::Dataset(DatasetError::UnknownShape(_)) => (StatusCode::NOT_FOUND, "shape_not_found"),
            E::NoEdits => (StatusCode::BAD_REQUEST, "no_edits"),
            E::InvalidArgument(_) | E::ShapeMismatch(_) => (StatusCode::BAD_REQUEST, "invalid_argument"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        Self { status, code, message }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "code": self.code, "message": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// `Json` whose rejections use the service error body.
struct JsonBody<T>(T);

impl<S: Send + Sync, T: DeserializeOwned> FromRequest<S> for JsonBody<T> {
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &S) -> Result<Self, ApiError> {
        match Json::<T>::from_request(req, state).await {
            Ok(Json(v)) => Ok(Self(v)),
            Err(e) => Err(ApiError { status: e.status(), code: "invalid_body", message: e.body_text() }),
        }
    }
}

/// `Query` whose rejections use the service error body.
struct Params<T>(T);

impl<S: Send + Sync, T: DeserializeOwned> FromRequestParts<S> for Params<T> {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, state: &S) -> Result<Self, ApiError> {
        match Query::<T>::from_request_parts(parts, state).await {
            Ok(Query(v)) => Ok(Self(v)),
            Err(e) => Err(ApiError { status: e.status(), code: "invalid_query", message: e.body_text() }),
        }
    }
}

struct SessionState {
    session: EditSession,
    last_mesh_hash: Option<String>,
}

struct Slot {
    state: Arc<Mutex<SessionState>>,
    events: broadcast::Sender<String>,
}

pub struct AppState {
    model: Model,
    data: Dataset,
    cfg: ServiceConfig,
    next_id: AtomicU64,
    sessions: StdMutex<BTreeMap<String, Arc<Slot>>>,
}

impl AppState {
    pub fn new(model: Model, data: Dataset, cfg: ServiceConfig) -> Arc<Self> {
        Arc::new(Self { model, data, cfg, next_id: AtomicU64::new(0), sessions: StdMutex::new(BTreeMap::new()) })
    }

    fn slot(&self, id: &str) -> ApiResult<Arc<Slot>> {
        let sessions = self.sessions.lock().expect("session map poisoned");
        sessions.get(id).cloned().ok_or_else(|| handlefield::Error::SessionNotFound(id.to_string()).into())
    }
}

/// Runs blocking model work off the async executor.
async fn blocking<T, F>(f: F) -> ApiResult<T>
where
    F: FnOnce() -> ApiResult<T> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError::internal(format!("worker failed: {e}")))?
}

fn flat(points: &[Point3]) -> Vec<[f64; 3]> {
    points.iter().map(|p| p.to_array()).collect()
}

fn mesh_or_empty(model: &Model, code: &LatentCode, resolution: usize, level: f64) -> ApiResult<TriangleMesh> {
    match extract_mesh(model, code, resolution, level) {
        Ok(m) => Ok(m),
        Err(handlefield::Error::Geometry(GeometryError::EmptyLevelSet { .. })) => Ok(TriangleMesh::default()),
        Err(e) => Err(e.into()),
    }
}

fn round_event(snap: &RoundSnapshot) -> String {
    json!({
        "type": "round",
        "round": snap.round,
        "handles": flat(&snap.latent.handles),
        "progress": snap.progress,
    })
    .to_string()
}

#[derive(Debug, Serialize)]
struct SessionView {
    session_id: String,
    shape_id: Option<u64>,
    handles: Vec<[f64; 3]>,
    style: Vec<f64>,
    edits_applied: u64,
    history: Vec<Value>,
    last_mesh_hash: Option<String>,
}

fn view(s: &SessionState) -> SessionView {
    SessionView {
        session_id: s.session.id.clone(),
        shape_id: s.session.shape_id,
        handles: flat(&s.session.current.handles),
        style: s.session.current.style.clone(),
        edits_applied: s.session.edits_applied,
        history: s
            .session
            .history
            .iter()
            .map(|r| json!({ "round": r.round, "handles": flat(&r.latent.handles), "progress": r.progress }))
            .collect(),
        last_mesh_hash: s.last_mesh_hash.clone(),
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/shapes", get(shapes))
        .route("/session", post(create_session))
        .route("/session/{id}", get(get_session).delete(close_session))
        .route("/session/{id}/edit", post(edit))
        .route("/session/{id}/style", post(style))
        .route("/session/{id}/mesh", get(mesh))
        .route("/session/{id}/segment", post(segment_session))
        .route("/session/{id}/stream", get(stream))
        .with_state(state)
}

pub async fn serve(bind: &str, model: Model, data: Dataset, cfg: ServiceConfig) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(bind).await?;
    log::info!("listening on {}", listener.local_addr()?);
    println!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(AppState::new(model, data, cfg))).await?;
    Ok(())
}

async fn health(State(app): State<Arc<AppState>>) -> Json<Value> {
    let sessions = app.sessions.lock().expect("session map poisoned").len();
    Json(json!({
        "status": "ok",
        "shapes": app.data.len(),
        "handle_count": app.model.config.handle_count,
        "sessions": sessions,
    }))
}

async fn shapes(State(app): State<Arc<AppState>>) -> Json<Value> {
    let list: Vec<Value> = app
        .data
        .shapes
        .iter()
        .map(|r| json!({ "shape_id": r.shape_id, "outlier": r.is_outlier(), "has_handles": r.handles.is_some() }))
        .collect();
    Json(Value::Array(list))
}

#[derive(Debug, Deserialize)]
struct CreateBody {
    shape_id: u64,
}

async fn create_session(State(app): State<Arc<AppState>>, JsonBody(body): JsonBody<CreateBody>) -> ApiResult<Response> {
    {
        let sessions = app.sessions.lock().expect("session map poisoned");
        if sessions.len() >= app.cfg.max_sessions {
            return Err(ApiError {
                status: StatusCode::SERVICE_UNAVAILABLE,
                code: "session_limit",
                message: format!("at most {} open sessions", app.cfg.max_sessions),
            });
        }
    }
    let a = app.clone();
    let code = blocking(move || {
        let rec = a.data.get(body.shape_id).map_err(handlefield::Error::from)?;
        Ok(a.model.encode(&rec.sampling.uniform)?)
    })
    .await?;
    let id = format!("s{}", app.next_id.fetch_add(1, Ordering::SeqCst));
    let state = SessionState { session: EditSession::new(id.clone(), Some(body.shape_id), code), last_mesh_hash: None };
    let v = view(&state);
    let (events, _) = broadcast::channel(256);
    let slot = Arc::new(Slot { state: Arc::new(Mutex::new(state)), events });
    app.sessions.lock().expect("session map poisoned").insert(id, slot);
    Ok((StatusCode::CREATED, Json(v)).into_response())
}

async fn get_session(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<SessionView>> {
    let slot = app.slot(&id)?;
    let s = slot.state.lock().await;
    Ok(Json(view(&s)))
}

async fn close_session(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<StatusCode> {
    let removed = app.sessions.lock().expect("session map poisoned").remove(&id);
    match removed {
        Some(_) => Ok(StatusCode::NO_CONTENT),
        None => Err(handlefield::Error::SessionNotFound(id).into()),
    }
}

#[derive(Debug, Deserialize)]
struct EditItem {
    handle: usize,
    target: [f64; 3],
}

#[derive(Debug, Deserialize)]
struct EditBody {
    edits: Vec<EditItem>,
    #[serde(default)]
    rounds: Option<usize>,
}

#[derive(Debug, Deserialize)]
struct RoundsQuery {
    rounds: Option<usize>,
}

async fn edit(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    Params(q): Params<RoundsQuery>,
    JsonBody(body): JsonBody<EditBody>,
) -> ApiResult<Json<Value>> {
    let slot = app.slot(&id)?;
    let mut cfg = ProjectionConfig {
        mesh_resolution: app.cfg.resolution,
        mesh_level: app.cfg.level,
        ..app.cfg.projection.clone()
    };
    if let Some(r) = q.rounds.or(body.rounds) {
        if r == 0 {
            return Err(ApiError::bad_request("invalid_argument", "rounds must be positive"));
        }
        cfg.max_rounds = r;
    }
    let request = EditRequest::new(body.edits.iter().map(|e| (e.handle, Point3::from_array(e.target))).collect());
    request.validate(app.model.config.handle_count)?;
    let mut guard = slot.state.clone().lock_owned().await;
    let events = slot.events.clone();
    let a = app.clone();
    blocking(move || {
        let s = &mut *guard;
        let outcome = edit_handles_with(&a.model, &mut s.session, &request, &cfg, |snap| {
            let _ = events.send(round_event(snap));
        })?;
        let payload = MeshPayload::from_mesh(&outcome.mesh);
        s.last_mesh_hash = Some(payload.hash.clone());
        let _ = events.send(
            json!({
                "type": "final",
                "round": outcome.rounds,
                "handles": flat(&outcome.latent.handles),
                "stopped_early": outcome.stopped_early,
                "mesh": payload,
            })
            .to_string(),
        );
        Ok(Json(json!({
            "rounds": outcome.rounds,
            "stopped_early": outcome.stopped_early,
            "mesh_hash": payload.hash,
            "session": view(s),
        })))
    })
    .await
}

#[derive(Debug, Deserialize)]
struct StyleBody {
    donor_shape_id: u64,
}

async fn style(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    JsonBody(body): JsonBody<StyleBody>,
) -> ApiResult<Json<SessionView>> {
    let slot = app.slot(&id)?;
    let a = app.clone();
    let donor = blocking(move || {
        let rec = a.data.get(body.donor_shape_id).map_err(handlefield::Error::from)?;
        Ok(a.model.encode_style(&rec.sampling.uniform)?)
    })
    .await?;
    let mut s = slot.state.lock().await;
    s.session.set_style(donor);
    let _ = slot.events.send(json!({ "type": "style", "donor_shape_id": body.donor_shape_id }).to_string());
    Ok(Json(view(&s)))
}

#[derive(Debug, Deserialize)]
struct MeshQuery {
    resolution: Option<usize>,
    level: Option<f64>,
}

async fn mesh(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    Params(q): Params<MeshQuery>,
) -> ApiResult<Json<MeshPayload>> {
    let resolution = q.resolution.unwrap_or(app.cfg.resolution);
    let level = q.level.unwrap_or(app.cfg.level);
    check_mesh(resolution, level).map_err(|e| ApiError::bad_request("invalid_argument", e.to_string()))?;
    let slot = app.slot(&id)?;
    let mut guard = slot.state.clone().lock_owned().await;
    let a = app.clone();
    blocking(move || {
        let m = mesh_or_empty(&a.model, &guard.session.current, resolution, level)?;
        let payload = MeshPayload::from_mesh(&m);
        guard.last_mesh_hash = Some(payload.hash.clone());
        Ok(Json(payload))
    })
    .await
}

#[derive(Debug, Deserialize)]
struct SegmentBody {
    k: usize,
    #[serde(default)]
    samples: Option<usize>,
    #[serde(default)]
    repetitions: Option<usize>,
}

async fn segment_session(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    JsonBody(body): JsonBody<SegmentBody>,
) -> ApiResult<Json<Value>> {
    let n = body.samples.unwrap_or(1024);
    if body.k < 1 || n <= body.k {
        return Err(ApiError::bad_request("invalid_argument", format!("need 1 <= k < samples, got k = {}", body.k)));
    }
    let slot = app.slot(&id)?;
    let guard = slot.state.clone().lock_owned().await;
    let a = app.clone();
    blocking(move || {
        let s = &guard.session;
        let shape_id = s.shape_id.ok_or_else(|| ApiError::bad_request("invalid_argument", "session has no source shape"))?;
        let points = a.data.get(shape_id).map_err(handlefield::Error::from)?.surface_cloud(n, a.cfg.seed);
        let cfg = SegmentationConfig {
            parts: body.k,
            repetitions: body.repetitions.unwrap_or(256),
            seed: a.cfg.seed,
            ..SegmentationConfig::default()
        };
        let labels = segment(&a.model, &s.current, &points, &cfg)?;
        Ok(Json(json!({ "labels": labels, "samples": flat(&points) })))
    })
    .await
}

async fn stream(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    ws: WebSocketUpgrade,
) -> ApiResult<Response> {
    let slot = app.slot(&id)?;
    // Subscribe before the upgrade so no event sent after this request is missed.
    let rx = slot.events.subscribe();
    let hello = {
        let s = slot.state.lock().await;
        json!({ "type": "state", "handles": flat(&s.session.current.handles), "edits_applied": s.session.edits_applied })
            .to_string()
    };
    Ok(ws.on_upgrade(move |socket| forward(socket, hello, rx)))
}

async fn forward(mut socket: WebSocket, hello: String, mut rx: broadcast::Receiver<String>) {
    if socket.send(Message::Text(hello.into())).await.is_err() {
        return;
    }
    loop {
        tokio::select! {
            ev = rx.recv() => match ev {
                Ok(text) => {
                    if socket.send(Message::Text(text.into())).await.is_err() {
                        return;
                    }
                }
                Err(broadcast::error::RecvError::Lagged(n)) => {
                    let note = json!({ "type": "lagged", "missed": n }).to_string();
                    if socket.send(Message::Text(note.into())).await.is_err() {
                        return;
                    }
                }
                Err(broadcast::error::RecvError::Closed) => return,
            },
            incoming = socket.recv() => match incoming {
                Some(Ok(Message::Close(_))) | None | Some(Err(_)) => return,
                Some(Ok(_)) => {}
            },
        }
    }
}
