//! HTTP surface of the gateway.
//!
//! * `POST /v1/chat` answers with a `CompletionResult`, or with
//!   `text/event-stream` when `stream` is set: one `token` event per token
//!   (`{"index", "text"}`) and a terminal `done` event carrying the
//!   `CompletionResult`.
//! * `GET /v1/models` lists model descriptors.
//! * `GET /healthz` answers `{"status": "ok"}`.
//! * `GET /metrics` serves Prometheus text.

use std::convert::Infallible;
use std::net::SocketAddr;
use std::ops::ControlFlow;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::sse::{Event, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::json;
use tokio::net::TcpListener;
use tokio::sync::mpsc;

use super::{ChatRequest, Gateway, GatewayError};
use crate::monitor::prometheus::CONTENT_TYPE;

pub fn router(gateway: Arc<Gateway>) -> Router {
    Router::new()
        .route("/v1/chat", post(chat))
        .route("/v1/models", get(models))
        .route("/healthz", get(health))
        .route("/metrics", get(metrics))
        .with_state(gateway)
}

/// Serves until the listener fails.
pub async fn serve(listener: TcpListener, gateway: Arc<Gateway>) -> std::io::Result<()> {
    axum::serve(listener, router(gateway)).await
}

/// Binds an ephemeral local port and serves in the background.
pub async fn spawn_local(gateway: Arc<Gateway>) -> std::io::Result<SocketAddr> {
    let listener = TcpListener::bind("127.0.0.1:0").await?;
    let addr = listener.local_addr()?;
    tokio::spawn(serve(listener, gateway));
    Ok(addr)
}

fn error_response(e: &GatewayError) -> Response {
    let status = StatusCode::from_u16(e.status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
    let body = match e {
        GatewayError::Upstream { message, partial } => {
            json!({"error": message, "kind": "upstream", "result": partial})
        }
        GatewayError::ModelNotFound(m) => json!({"error": e.to_string(), "kind": "model_not_found", "model": m}),
        GatewayError::ContextOverflow {
            prompt_tokens,
            max_context_tokens,
        } => json!({
            "error": e.to_string(),
            "kind": "context_overflow",
            "prompt_tokens": prompt_tokens,
            "max_context_tokens": max_context_tokens,
        }),
        GatewayError::InvalidRequest(_) => json!({"error": e.to_string(), "kind": "invalid_request"}),
        _ => json!({"error": e.to_string(), "kind": "internal"}),
    };
    (status, Json(body)).into_response()
}

async fn chat(
    State(gw): State<Arc<Gateway>>,
    body: Result<Json<ChatRequest>, JsonRejection>,
) -> Response {
    let req = match body {
        Ok(Json(r)) => r,
        Err(e) => return error_response(&GatewayError::InvalidRequest(e.body_text())),
    };
    let stream = req.stream;
    let prepared = match gw.prepare(req) {
        Ok(p) => p,
        Err(e) => return error_response(&e),
    };

    if !stream {
        return match gw.execute(prepared, &mut |_| ControlFlow::Continue(())).await {
            Ok(r) => Json(r).into_response(),
            Err(e) => error_response(&e),
        };
    }

    let (tx, mut rx) = mpsc::unbounded_channel::<Event>();
    tokio::spawn(async move {
        let token_tx = tx.clone();
        let outcome = gw
            .execute(prepared, &mut |ev| {
                let event = Event::default().event("token").json_data(&ev).expect("token json");
                match token_tx.send(event) {
                    Ok(()) => ControlFlow::Continue(()),
                    Err(_) => ControlFlow::Break(()),
                }
            })
            .await;
        let done = match outcome {
            Ok(r) => Some(r),
            Err(GatewayError::Upstream { partial, .. }) => Some(*partial),
            Err(e) => {
                tracing::debug!("stream ended: {e}");
                None
            }
        };
        if let Some(r) = done {
            let _ = tx.send(Event::default().event("done").json_data(&r).expect("done json"));
        }
    });
    let events = futures::stream::poll_fn(move |cx| rx.poll_recv(cx).map(|o| o.map(Ok::<_, Infallible>)));
    Sse::new(events).into_response()
}

async fn models(State(gw): State<Arc<Gateway>>) -> Response {
    Json(gw.list_models()).into_response()
}

async fn health() -> Response {
    Json(json!({"status": "ok"})).into_response()
}

async fn metrics(State(gw): State<Arc<Gateway>>) -> Response {
    match gw.metrics_snapshot().render() {
        Ok(text) => ([(header::CONTENT_TYPE, CONTENT_TYPE)], text).into_response(),
        Err(e) => (StatusCode::INTERNAL_SERVER_ERROR, e.to_string()).into_response(),
    }
}
