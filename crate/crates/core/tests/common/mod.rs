//! A minimal stand-in for a llama.cpp server, plus registry helpers.
#![allow(dead_code)]

use std::net::SocketAddr;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::{json, Value};

use edgellm_core::backends::SimConfig;
use edgellm_core::registry::Registry;

#[derive(Clone)]
pub struct Stub {
    pub tokens: Vec<String>,
    /// Sent verbatim as the final chunk's `timings` object.
    pub timings: Value,
    pub model_id: String,
    pub scoring: bool,
}

impl Default for Stub {
    fn default() -> Self {
        Stub {
            tokens: ["Hello", ",", " edge", " world"].map(String::from).to_vec(),
            timings: json!({"prompt_n": 17, "prompt_ms": 523.25, "predicted_n": 4, "predicted_ms": 901.5,
                            "prompt_per_token_ms": 30.78, "predicted_per_second": 4.437}),
            model_id: "stub-7b-q4_k_m.gguf".into(),
            scoring: true,
        }
    }
}

async fn completion(State(s): State<Stub>, Json(req): Json<Value>) -> impl IntoResponse {
    let n = req["n_predict"].as_u64().unwrap_or(u64::MAX) as usize;
    let emitted = s.tokens.len().min(n);
    let mut body = String::new();
    for t in &s.tokens[..emitted] {
        body.push_str(&format!("data: {}\n\n", json!({"content": t, "stop": false})));
    }
    let stop_type = if emitted < s.tokens.len() { "limit" } else { "eos" };
    body.push_str(&format!(
        "data: {}\n\n",
        json!({"content": "", "stop": true, "stop_type": stop_type, "timings": s.timings})
    ));
    ([("content-type", "text/event-stream")], body)
}

async fn health() -> impl IntoResponse {
    Json(json!({"status": "ok"}))
}

async fn models(State(s): State<Stub>) -> impl IntoResponse {
    Json(json!({"object": "list", "data": [{"id": s.model_id, "object": "model"}]}))
}

/// Echo scoring: one token per character, each worth -0.5.
async fn completions(State(s): State<Stub>, Json(req): Json<Value>) -> axum::response::Response {
    if !s.scoring {
        return StatusCode::NOT_FOUND.into_response();
    }
    let prompt = req["prompt"].as_str().unwrap_or_default();
    let n = prompt.chars().count();
    let offsets: Vec<usize> = (0..n).collect();
    let lps: Vec<Value> = (0..n).map(|i| if i == 0 { Value::Null } else { json!(-0.5) }).collect();
    Json(json!({"choices": [{"text": prompt, "logprobs": {"token_logprobs": lps, "text_offset": offsets}}]}))
        .into_response()
}

pub async fn spawn_stub(stub: Stub) -> SocketAddr {
    let app = Router::new()
        .route("/completion", post(completion))
        .route("/health", get(health))
        .route("/v1/models", get(models))
        .route("/v1/completions", post(completions))
        .with_state(stub);
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    addr
}

/// A port with nothing listening on it.
pub fn dead_port() -> SocketAddr {
    let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    l.local_addr().unwrap()
}

pub fn http_model(name: &str, url: &str, params: f64) -> Value {
    json!({"name": name, "params_billions": params, "quantization": "Q4_K_M",
           "backend": {"kind": "http", "url": url}, "max_context_tokens": 4096})
}

pub fn sim_model(name: &str, params: f64, sim: &SimConfig) -> Value {
    json!({"name": name, "params_billions": params, "quantization": "Q4_K_M",
           "backend": {"kind": "sim", "sim": sim}, "max_context_tokens": 100000})
}

pub fn registry(models: Vec<Value>) -> Registry {
    Registry::from_json(&json!({ "models": models }).to_string()).unwrap()
}

pub fn workspace_file(rel: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}
