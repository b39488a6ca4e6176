use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use asmrag_core::{AddrRange, ListingFormat};
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;
use tower_http::services::ServeDir;

use crate::queue::{Decision, ItemStatus, QueueError};
use crate::service::{ServiceError, TriageService};

pub struct ApiError(ServiceError);

impl<E: Into<ServiceError>> From<E> for ApiError {
    fn from(e: E) -> Self {
        ApiError(e.into())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, code) = match &self.0 {
            ServiceError::Queue(QueueError::UnknownItem(_)) => (StatusCode::NOT_FOUND, "unknown_item"),
            ServiceError::Queue(QueueError::AlreadyResolved(_)) => (StatusCode::CONFLICT, "already_resolved"),
            ServiceError::Queue(QueueError::BenignVerdict) => (StatusCode::UNPROCESSABLE_ENTITY, "benign_verdict"),
            ServiceError::BadRequest(_) => (StatusCode::BAD_REQUEST, "bad_request"),
            ServiceError::Core(asmrag_core::Error::Ingest(_)) => (StatusCode::BAD_REQUEST, "invalid_listing"),
            ServiceError::Core(asmrag_core::Error::Embed(_)) => (StatusCode::BAD_GATEWAY, "embedding_failed"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        if status.is_server_error() {
            log::error!("{}", self.0);
        }
        (status, Json(json!({ "error": code, "message": self.0.to_string() }))).into_response()
    }
}

type AppState = Arc<TriageService>;

async fn blocking<T, F>(svc: AppState, f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce(&TriageService) -> Result<T, ServiceError> + Send + 'static,
{
    tokio::task::spawn_blocking(move || f(&svc))
        .await
        .map_err(|e| ApiError(ServiceError::BadRequest(format!("worker failed: {e}"))))?
        .map_err(ApiError)
}

#[derive(Debug, Deserialize)]
pub struct ScanParams {
    /// `0x<lo>:0x<hi>` image range used for address canonicalization.
    pub addr_range: String,
    #[serde(default)]
    pub sample_id: Option<String>,
    /// `jsonl` (default) or `flatasm`.
    #[serde(default)]
    pub format: Option<String>,
}

async fn scan(State(svc): State<AppState>, Query(p): Query<ScanParams>, body: String) -> Result<Response, ApiError> {
    let range: AddrRange = p
        .addr_range
        .parse()
        .map_err(|e: asmrag_core::ingest::IngestError| ServiceError::BadRequest(e.to_string()))?;
    let format: ListingFormat = p
        .format
        .as_deref()
        .unwrap_or("jsonl")
        .parse()
        .map_err(ServiceError::BadRequest)?;
    let outcome = blocking(svc, move |svc| {
        let hint = p.sample_id.clone().unwrap_or_default();
        let functions = asmrag_core::ingest::parse_listing(body.as_bytes(), format, &hint)
            .map_err(asmrag_core::Error::from)?;
        let sample_id = match (&p.sample_id, functions.first()) {
            (Some(s), _) => s.clone(),
            (None, Some(f)) => f.sample_id.clone(),
            (None, None) => return Err(ServiceError::BadRequest("sample_id required for an empty listing".into())),
        };
        if functions.iter().any(|f| f.sample_id != sample_id) && format == ListingFormat::FunctionJsonl {
            return Err(ServiceError::BadRequest("records span more than one sample".into()));
        }
        svc.scan(&sample_id, &functions, range)
    })
    .await?;
    Ok(Json(outcome).into_response())
}

#[derive(Debug, Deserialize)]
pub struct QueueParams {
    #[serde(default)]
    pub status: Option<String>,
}

async fn queue(State(svc): State<AppState>, Query(p): Query<QueueParams>) -> Result<Response, ApiError> {
    let status = match p.status.as_deref() {
        None | Some("all") => None,
        Some(s) => Some(s.parse::<ItemStatus>().map_err(ServiceError::BadRequest)?),
    };
    Ok(Json(svc.queue(status)).into_response())
}

async fn item(State(svc): State<AppState>, Path(id): Path<u64>) -> Result<Response, ApiError> {
    Ok(Json(svc.item(id)?).into_response())
}

#[derive(Debug, Deserialize)]
pub struct ResolveBody {
    pub decision: Decision,
    pub analyst_id: String,
}

async fn resolve(
    State(svc): State<AppState>,
    Path(id): Path<u64>,
    Json(body): Json<ResolveBody>,
) -> Result<Response, ApiError> {
    let r = blocking(svc, move |svc| svc.resolve(id, body.decision, &body.analyst_id)).await?;
    Ok(Json(r).into_response())
}

async fn kb_stats(State(svc): State<AppState>) -> Json<asmrag_core::kb::KbStats> {
    Json(svc.kb_stats())
}

/// API routes, plus the UI bundle from `static_dir` for any other path.
pub fn router(svc: AppState, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/scan", post(scan))
        .route("/api/queue", get(queue))
        .route("/api/items/{id}", get(item))
        .route("/api/items/{id}/resolve", post(resolve))
        .route("/api/kb/stats", get(kb_stats))
        .with_state(svc);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// Binds `addr` and serves until Ctrl-C.
pub async fn serve(svc: AppState, addr: SocketAddr, static_dir: Option<PathBuf>) -> Result<(), ServiceError> {
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| ServiceError::BindFailure {
            addr: addr.to_string(),
            reason: e.to_string(),
        })?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(svc, static_dir))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
