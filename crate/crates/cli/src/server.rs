//! HTTP review API over a [`ReviewStore`].

use std::collections::BTreeMap;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use labharm::pipeline::HarmonizationResult;
use labharm::review::{ReviewError, ReviewStore, Verdict, VerdictRequest};
use labharm::TagStatus;

pub const DEFAULT_QUEUE_LIMIT: usize = 50;
pub const MAX_QUEUE_LIMIT: usize = 1000;

pub struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

impl From<ReviewError> for ApiError {
    fn from(e: ReviewError) -> Self {
        let status = match &e {
            ReviewError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ReviewError::NotFound(_) => StatusCode::NOT_FOUND,
            ReviewError::Conflict(_) => StatusCode::CONFLICT,
            ReviewError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(status, e.to_string())
    }
}

fn bad_request(msg: impl Into<String>) -> ApiError {
    ApiError(StatusCode::BAD_REQUEST, msg.into())
}

#[derive(Debug, Deserialize)]
pub struct QueueParams {
    /// One or more statuses separated by `|` or `,`.
    pub status: Option<String>,
    pub limit: Option<usize>,
    pub offset: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct QueuePage {
    /// Matching items before `offset`/`limit` are applied.
    pub total: usize,
    pub items: Vec<HarmonizationResult>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Stats {
    pub results: usize,
    pub tags: BTreeMap<String, usize>,
    pub feedback_events: usize,
    pub verdicts: BTreeMap<String, usize>,
}

fn parse_statuses(raw: Option<&str>) -> Result<Vec<TagStatus>, ApiError> {
    let Some(raw) = raw else {
        return Ok(vec![TagStatus::Pending, TagStatus::Reranked]);
    };
    raw.split(['|', ','])
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<TagStatus>().map_err(|_| bad_request(format!("unknown status '{s}'"))))
        .collect()
}

async fn health() -> Json<serde_json::Value> {
    Json(json!({ "status": "ok" }))
}

async fn queue(State(store): State<Arc<ReviewStore>>, Query(q): Query<QueueParams>) -> Result<Json<QueuePage>, ApiError> {
    let statuses = parse_statuses(q.status.as_deref())?;
    let limit = q.limit.unwrap_or(DEFAULT_QUEUE_LIMIT);
    if limit == 0 || limit > MAX_QUEUE_LIMIT {
        return Err(bad_request(format!("limit must be in 1..={MAX_QUEUE_LIMIT}")));
    }
    let snap = store.snapshot();
    let total = snap.results.iter().filter(|r| statuses.contains(&r.tag)).count();
    let items = snap
        .queue(&statuses, q.offset.unwrap_or(0), limit)
        .into_iter()
        .map(|r| (*r).clone())
        .collect();
    Ok(Json(QueuePage { total, items }))
}

async fn result(State(store): State<Arc<ReviewStore>>, Path(id): Path<String>) -> Result<Json<HarmonizationResult>, ApiError> {
    store
        .snapshot()
        .get(&id)
        .map(|r| Json((**r).clone()))
        .ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("unknown query id '{id}'")))
}

async fn verdict(State(store): State<Arc<ReviewStore>>, body: Bytes) -> Result<Json<HarmonizationResult>, ApiError> {
    // parsed by hand so every malformed body is a 400
    let req: VerdictRequest =
        serde_json::from_slice(&body).map_err(|e| bad_request(format!("malformed verdict: {e}")))?;
    let updated = tokio::task::spawn_blocking(move || store.submit(&req))
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(Json((*updated).clone()))
}

async fn stats(State(store): State<Arc<ReviewStore>>) -> Json<Stats> {
    let snap = store.snapshot();
    let tags = snap.tag_counts().into_iter().map(|(t, n)| (t.to_string(), n)).collect();
    let verdicts = [Verdict::Accept, Verdict::Reject]
        .into_iter()
        .map(|v| {
            let name = match v {
                Verdict::Accept => "accept",
                Verdict::Reject => "reject",
            };
            (name.to_string(), snap.verdicts.get(&v).copied().unwrap_or(0))
        })
        .collect();
    Json(Stats {
        results: snap.results.len(),
        tags,
        feedback_events: snap.feedback_events,
        verdicts,
    })
}

pub fn router(store: Arc<ReviewStore>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/queue", get(queue))
        .route("/result/:query_id", get(result))
        .route("/verdict", post(verdict))
        .route("/stats", get(stats))
        .with_state(store)
}

/// Binds `addr` and serves until the process is stopped.
pub async fn serve(store: Arc<ReviewStore>, addr: &str) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("review API listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(store)).await?;
    Ok(())
}
