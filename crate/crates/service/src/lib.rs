//! HTTP service for on-the-fly retrieval: a client opens a session, submits
//! strokes one at a time and receives the re-ranked gallery after each.

pub mod model;
pub mod session;

use std::collections::HashMap;
use std::future::Future;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use darp_core::rng::derive_seed;
use darp_core::sketchgen::Point;
use serde::Deserialize;
use serde_json::json;
use tower_http::cors::{AllowOrigin, Any, CorsLayer};

pub use model::{ModelOptions, RankEntry, RankingResponse, RetrievalModel};
pub use session::Session;

pub const DEFAULT_TTL: Duration = Duration::from_secs(15 * 60);

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub ttl: Duration,
    pub seed: u64,
    /// `None` allows any origin.
    pub cors_origin: Option<String>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            ttl: DEFAULT_TTL,
            seed: 0,
            cors_origin: None,
        }
    }
}

type SessionRef = Arc<Mutex<Session>>;

pub struct AppState {
    pub model: Arc<RetrievalModel>,
    sessions: Mutex<HashMap<String, SessionRef>>,
    cfg: ServiceConfig,
    created: AtomicU64,
}

impl AppState {
    pub fn new(model: RetrievalModel, cfg: ServiceConfig) -> Arc<Self> {
        Arc::new(Self {
            model: Arc::new(model),
            sessions: Mutex::new(HashMap::new()),
            cfg,
            created: AtomicU64::new(0),
        })
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().unwrap().len()
    }

    /// Drop sessions idle for longer than the TTL; returns how many went.
    pub fn expire(&self) -> usize {
        let ttl = self.cfg.ttl;
        let mut map = self.sessions.lock().unwrap();
        let before = map.len();
        map.retain(|_, s| match s.try_lock() {
            Ok(s) => s.touched.elapsed() <= ttl,
            Err(_) => true,
        });
        before - map.len()
    }

    fn lookup(&self, id: &str) -> Result<SessionRef, ApiError> {
        let mut map = self.sessions.lock().unwrap();
        let Some(s) = map.get(id).cloned() else {
            return Err(ApiError::not_found(format!("unknown session `{id}`")));
        };
        let expired = s
            .try_lock()
            .map(|g| g.touched.elapsed() > self.cfg.ttl)
            .unwrap_or(false);
        if expired {
            map.remove(id);
            return Err(ApiError::not_found(format!("session `{id}` expired")));
        }
        Ok(s)
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, message)
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }
}

impl From<darp_core::Error> for ApiError {
    fn from(e: darp_core::Error) -> Self {
        use darp_core::Error::*;
        let status = match e {
            Input(_) | Config(_) => StatusCode::BAD_REQUEST,
            Lookup(_) => StatusCode::NOT_FOUND,
            State(_) => StatusCode::CONFLICT,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct CreateBody {
    target_id: Option<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct StrokeBody {
    points: Vec<Point>,
}

#[derive(Deserialize, Default)]
struct StrokeQuery {
    #[serde(default)]
    sample: bool,
}

async fn health() -> &'static str {
    "ok"
}

async fn create_session(
    State(st): State<Arc<AppState>>,
    body: Bytes,
) -> Result<Response, ApiError> {
    let body: CreateBody = if body.iter().all(u8::is_ascii_whitespace) {
        CreateBody::default()
    } else {
        serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(e.to_string()))?
    };
    let n = st.created.fetch_add(1, Ordering::Relaxed);
    let session = Session::new(&st.model, body.target_id, derive_seed(st.cfg.seed, n))?;
    let id = uuid::Uuid::new_v4().simple().to_string();
    st.sessions
        .lock()
        .unwrap()
        .insert(id.clone(), Arc::new(Mutex::new(session)));
    Ok((StatusCode::CREATED, Json(json!({ "session_id": id }))).into_response())
}

async fn submit_stroke(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<StrokeQuery>,
    body: Bytes,
) -> Result<Json<RankingResponse>, ApiError> {
    let session = st.lookup(&id)?;
    let body: StrokeBody = serde_json::from_slice(&body)
        .map_err(|e| ApiError::bad_request(format!("malformed stroke: {e}")))?;
    let model = st.model.clone();
    let resp = tokio::task::spawn_blocking(move || {
        let mut s = session.lock().unwrap();
        s.submit(&model, body.points, q.sample)
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(Json(resp))
}

async fn get_ranking(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> Result<Json<RankingResponse>, ApiError> {
    let session = st.lookup(&id)?;
    let s = session.lock().unwrap();
    Ok(Json(s.ranking()?.clone()))
}

async fn get_image(
    State(st): State<Arc<AppState>>,
    Path(file): Path<String>,
) -> Result<Response, ApiError> {
    let id = file
        .strip_suffix(".png")
        .ok_or_else(|| ApiError::not_found(format!("no image `{file}`")))?;
    let png = st
        .model
        .image_png(id)
        .ok_or_else(|| ApiError::not_found(format!("unknown item `{id}`")))??;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

pub fn router(state: Arc<AppState>) -> Router {
    let origin = match &state.cfg.cors_origin {
        Some(o) => match HeaderValue::from_str(o) {
            Ok(v) => AllowOrigin::exact(v),
            Err(_) => AllowOrigin::any(),
        },
        None => AllowOrigin::any(),
    };
    let cors = CorsLayer::new()
        .allow_origin(origin)
        .allow_methods(Any)
        .allow_headers(Any);
    Router::new()
        .route("/health", get(health))
        .route("/session", post(create_session))
        .route("/session/{id}/stroke", post(submit_stroke))
        .route("/session/{id}/ranking", get(get_ranking))
        .route("/images/{file}", get(get_image))
        .layer(cors)
        .with_state(state)
}

/// Serve until `shutdown` resolves, then let in-flight requests finish.
/// Idle sessions are swept once a minute.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: Arc<AppState>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let sweeper = {
        let st = state.clone();
        tokio::spawn(async move {
            let mut tick = tokio::time::interval(Duration::from_secs(60).min(st.cfg.ttl));
            loop {
                tick.tick().await;
                let n = st.expire();
                if n > 0 {
                    log::info!("expired {n} idle sessions");
                }
            }
        })
    };
    let res = axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown)
        .await;
    sweeper.abort();
    res
}

/// Resolves on Ctrl-C or SIGTERM.
pub async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        if let Ok(mut s) = tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate())
        {
            s.recv().await;
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
}
