//! REST front end for the [`Emulator`].
//!
//! | Method | Path | Body / result |
//! |---|---|---|
//! | `POST` | `/radio-links` | → `RadioLink` |
//! | `GET` | `/radio-links` | → `[RadioLink]` |
//! | `PUT` | `/radio-links/{id}` | `{"state":"up"\|"down"}` → `RadioLink` |
//! | `DELETE` | `/radio-links/{id}` | |
//! | `POST` | `/pdu-sessions` | `{"radioLinkId"}` → `PduSession` |
//! | `GET` | `/pdu-sessions` | → `[PduSession]` |
//! | `DELETE` | `/pdu-sessions/{id}` | |
//! | `POST` | `/qos-flows` | `CreateFlow` → `QosFlow` |
//! | `GET` | `/qos-flows` | → `[QosFlow]` |
//! | `DELETE` | `/qos-flows/{session}/{qfi}` | |
//! | `POST` | `/filters` | `CreateFilter` → `MarkFilter` |
//! | `GET` | `/filters` | → `[MarkFilter]` |
//! | `DELETE` | `/filters/{id}` | |
//! | `GET` | `/tree` | text dump of the qdisc/class/filter tree |
//! | `GET` | `/healthz` | `{"status":"ok"}` |
//! | `POST` | `/classify` | `{"mark"}` → `Classification` |
//! | `POST` | `/transmit` | `TransmitRequest` → `Delivery` |
//!
//! Deletes take `?cascade=bool&idempotent=bool` and answer `204`. Errors come
//! back as `{"error": <kind>, "message": <text>}` with 404 (not-found), 409
//! (conflict, dependency-violation) or 400 (invalid).
//!
//! `/classify` and `/transmit` exist only to drive validation experiments;
//! they are not part of any 3GPP interface.

use std::sync::Arc;
use std::time::Duration;

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;

use super::model::*;
use super::EmulatorError;
use crate::enforce::FlowRef;

/// How `/transmit` treats time.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum TimeMode {
    /// Compute arrival times only.
    #[default]
    Virtual,
    /// Additionally hold the response for the packet's latency.
    WallClock,
}

#[derive(Clone)]
struct AppState {
    emulator: Arc<Emulator>,
    time_mode: TimeMode,
}

impl IntoResponse for EmulatorError {
    fn into_response(self) -> Response {
        let status = match self {
            EmulatorError::NotFound(_) => StatusCode::NOT_FOUND,
            EmulatorError::Conflict(_) | EmulatorError::DependencyViolation(_) => StatusCode::CONFLICT,
            EmulatorError::Invalid(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let message = match &self {
            EmulatorError::NotFound(m)
            | EmulatorError::Conflict(m)
            | EmulatorError::DependencyViolation(m)
            | EmulatorError::Invalid(m)
            | EmulatorError::Unreachable(m)
            | EmulatorError::Protocol(m) => m.clone(),
            EmulatorError::NotImplemented(what) => what.to_string(),
        };
        (status, Json(json!({ "error": self.kind(), "message": message }))).into_response()
    }
}

type ApiResult<T> = Result<T, EmulatorError>;

pub fn router(emulator: Arc<Emulator>, time_mode: TimeMode) -> Router {
    Router::new()
        .route("/healthz", get(|| async { Json(json!({ "status": "ok" })) }))
        .route("/radio-links", post(create_link).get(list_links))
        .route("/radio-links/{id}", delete(delete_link).put(set_link_state))
        .route("/pdu-sessions", post(create_session).get(list_sessions))
        .route("/pdu-sessions/{id}", delete(delete_session))
        .route("/qos-flows", post(create_flow).get(list_flows))
        .route("/qos-flows/{session}/{qfi}", delete(delete_flow))
        .route("/filters", post(create_filter).get(list_filters))
        .route("/filters/{id}", delete(delete_filter))
        .route("/tree", get(tree))
        .route("/classify", post(classify))
        .route("/transmit", post(transmit))
        .with_state(AppState { emulator, time_mode })
}

/// Serves until the listener fails.
pub async fn serve(listener: tokio::net::TcpListener, emulator: Arc<Emulator>, time_mode: TimeMode) -> std::io::Result<()> {
    tracing::info!("nef emulator listening on {}", listener.local_addr()?);
    axum::serve(listener, router(emulator, time_mode)).await
}

async fn create_link(State(s): State<AppState>) -> impl IntoResponse {
    (StatusCode::CREATED, Json(s.emulator.create_radio_link()))
}

async fn list_links(State(s): State<AppState>) -> Json<Vec<RadioLink>> {
    Json(s.emulator.radio_links())
}

#[derive(Deserialize)]
struct LinkStateBody {
    state: LinkState,
}

async fn set_link_state(
    State(s): State<AppState>,
    Path(id): Path<String>,
    Json(body): Json<LinkStateBody>,
) -> ApiResult<Json<RadioLink>> {
    s.emulator.set_radio_link_state(&id, body.state).map(Json)
}

async fn delete_link(
    State(s): State<AppState>,
    Path(id): Path<String>,
    Query(opts): Query<DeleteOpts>,
) -> ApiResult<StatusCode> {
    s.emulator.delete_radio_link(&id, opts)?;
    Ok(StatusCode::NO_CONTENT)
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct CreateSessionBody {
    radio_link_id: String,
}

async fn create_session(
    State(s): State<AppState>,
    Json(body): Json<CreateSessionBody>,
) -> ApiResult<(StatusCode, Json<PduSession>)> {
    Ok((StatusCode::CREATED, Json(s.emulator.create_pdu_session(&body.radio_link_id)?)))
}

async fn list_sessions(State(s): State<AppState>) -> Json<Vec<PduSession>> {
    Json(s.emulator.pdu_sessions())
}

async fn delete_session(
    State(s): State<AppState>,
    Path(id): Path<String>,
    Query(opts): Query<DeleteOpts>,
) -> ApiResult<StatusCode> {
    s.emulator.delete_pdu_session(&id, opts)?;
    Ok(StatusCode::NO_CONTENT)
}

async fn create_flow(
    State(s): State<AppState>,
    Json(body): Json<CreateFlow>,
) -> ApiResult<(StatusCode, Json<QosFlow>)> {
    Ok((StatusCode::CREATED, Json(s.emulator.create_qos_flow(&body)?)))
}

async fn list_flows(State(s): State<AppState>) -> Json<Vec<QosFlow>> {
    Json(s.emulator.qos_flows())
}

async fn delete_flow(
    State(s): State<AppState>,
    Path((session, qfi)): Path<(String, u8)>,
    Query(opts): Query<DeleteOpts>,
) -> ApiResult<StatusCode> {
    s.emulator.delete_qos_flow(&FlowRef::new(session, qfi), opts)?;
    Ok(StatusCode::NO_CONTENT)
}

async fn create_filter(
    State(s): State<AppState>,
    Json(body): Json<CreateFilter>,
) -> ApiResult<(StatusCode, Json<MarkFilter>)> {
    Ok((StatusCode::CREATED, Json(s.emulator.create_filter(&body)?)))
}

async fn list_filters(State(s): State<AppState>) -> Json<Vec<MarkFilter>> {
    Json(s.emulator.filters())
}

async fn delete_filter(
    State(s): State<AppState>,
    Path(id): Path<String>,
    Query(opts): Query<DeleteOpts>,
) -> ApiResult<StatusCode> {
    s.emulator.delete_filter(&id, opts)?;
    Ok(StatusCode::NO_CONTENT)
}

async fn tree(State(s): State<AppState>) -> String {
    s.emulator.dump_tree()
}

#[derive(Deserialize)]
struct ClassifyBody {
    mark: u32,
}

async fn classify(State(s): State<AppState>, Json(body): Json<ClassifyBody>) -> Json<Classification> {
    Json(s.emulator.classify(body.mark))
}

async fn transmit(State(s): State<AppState>, Json(body): Json<TransmitRequest>) -> ApiResult<Json<Delivery>> {
    let delivery = s.emulator.transmit(&body)?;
    if s.time_mode == TimeMode::WallClock {
        tokio::time::sleep(Duration::from_nanos(delivery.arrival_ns - delivery.send_time_ns)).await;
    }
    Ok(Json(delivery))
}
