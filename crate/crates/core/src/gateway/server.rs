use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use super::client::CompletionBackend;
use super::router::{route, GenerationParams, Handler, Hop};
use crate::error::{Error, Result};
use crate::registry::RegistryHandle;

pub struct GatewayState<B> {
    pub registry: RegistryHandle,
    pub backend: B,
    pub params: GenerationParams,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RouteRequest {
    pub query: String,
    #[serde(default)]
    pub max_tokens: Option<u32>,
    #[serde(default)]
    pub trace: Option<bool>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RouteResponse {
    pub answer: String,
    pub handler: Handler,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hops: Option<Vec<Hop>>,
}

#[derive(Debug, Default, Deserialize)]
struct TraceFlag {
    #[serde(default)]
    trace: Option<String>,
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(serde_json::json!({ "error": { "message": message.into() } }))).into_response()
}

async fn handle_route<B: CompletionBackend + 'static>(
    State(state): State<Arc<GatewayState<B>>>,
    Query(flag): Query<TraceFlag>,
    body: std::result::Result<Json<RouteRequest>, JsonRejection>,
) -> Response {
    let Json(req) = match body {
        Ok(b) => b,
        Err(rejection) => return error(StatusCode::BAD_REQUEST, rejection.body_text()),
    };
    if req.query.trim().is_empty() {
        return error(StatusCode::BAD_REQUEST, "`query` must not be empty");
    }
    let want_trace = req.trace.unwrap_or(false) || matches!(flag.trace.as_deref(), Some("1" | "true"));
    let mut params = state.params.clone();
    if let Some(m) = req.max_tokens {
        params.max_tokens = m;
    }
    let registry = state.registry.snapshot();
    match route(&state.backend, &registry, &req.query, &params).await {
        Ok(trace) => Json(RouteResponse {
            answer: trace.answer,
            handler: trace.handler,
            hops: want_trace.then_some(trace.hops),
        })
        .into_response(),
        Err(e @ (Error::Base(_) | Error::Expert { .. })) => error(StatusCode::BAD_GATEWAY, e.to_string()),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

async fn handle_registry<B: CompletionBackend + 'static>(State(state): State<Arc<GatewayState<B>>>) -> Response {
    match state.registry.snapshot().to_json() {
        Ok(doc) => ([(axum::http::header::CONTENT_TYPE, "application/json")], doc).into_response(),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

pub fn router<B: CompletionBackend + 'static>(state: Arc<GatewayState<B>>) -> Router {
    Router::new()
        .route("/v1/route", post(handle_route::<B>))
        .route("/v1/registry", get(handle_registry::<B>))
        .route("/health", get(|| async { "ok" }))
        .with_state(state)
}

pub async fn serve_listener<B: CompletionBackend + 'static>(
    state: Arc<GatewayState<B>>,
    listener: tokio::net::TcpListener,
) -> Result<()> {
    let addr = listener.local_addr().ok();
    tracing::info!(?addr, "gateway listening");
    axum::serve(listener, router(state))
        .await
        .map_err(|e| Error::Config(format!("server error: {e}")))
}

pub async fn serve<B: CompletionBackend + 'static>(state: Arc<GatewayState<B>>, listen: SocketAddr) -> Result<()> {
    let listener = tokio::net::TcpListener::bind(listen)
        .await
        .map_err(|e| Error::Config(format!("cannot bind {listen}: {e}")))?;
    serve_listener(state, listener).await
}
