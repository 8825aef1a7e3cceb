//! Backend adapters.
//!
//! Every backend offers the same three calls: `complete` streams generated
//! tokens and reports per-phase timings, `score` returns the cumulative
//! log-likelihood of a continuation, and `probe` checks liveness. Adapters
//! are stateless per call; each call owns its connection.

mod http;
mod sim;

use std::ops::ControlFlow;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use http::HttpBackend;
pub use sim::{ScoreEntry, SimBackend, SimClock, SimConfig, SimConfigError};

use crate::registry::BackendEndpoint;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("backend protocol error: {0}")]
    ProtocolError(String),
    #[error("completion cancelled")]
    Cancelled,
    #[error("backend lacks capability: {0}")]
    CapabilityMissing(String),
    #[error("invalid backend request: {0}")]
    InvalidRequest(String),
}

/// Per-phase token counts and durations as reported by the inference engine.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackendTimings {
    pub prompt_tokens: u64,
    pub prompt_ms: f64,
    pub generated_tokens: u64,
    pub generation_ms: f64,
}

impl BackendTimings {
    pub fn is_valid(&self) -> bool {
        [self.prompt_ms, self.generation_ms]
            .iter()
            .all(|v| v.is_finite() && *v >= 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Stop,
    MaxTokens,
    BackendError,
}

/// What a backend hands back once its token stream ends.
#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    pub token_count: u64,
    pub timings: Option<BackendTimings>,
    pub finish: FinishReason,
    /// Set when the backend's timing block was present but unusable.
    pub protocol_error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub context: String,
    pub continuation: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub alive: bool,
    pub reported_model: Option<String>,
}

/// Receives each generated token fragment in order. Returning
/// `ControlFlow::Break` cancels the completion.
pub type TokenSink<'a> = dyn FnMut(&str) -> ControlFlow<()> + Send + 'a;

#[derive(Debug)]
pub enum Backend {
    Simulated(SimBackend),
    Http(HttpBackend),
}

impl Backend {
    pub fn from_endpoint(endpoint: &BackendEndpoint) -> Backend {
        match endpoint {
            BackendEndpoint::Simulated(cfg) => Backend::Simulated(SimBackend::new(cfg.clone())),
            BackendEndpoint::HttpCompletion { url } => Backend::Http(HttpBackend::new(url)),
        }
    }

    pub fn kind_label(&self) -> &'static str {
        match self {
            Backend::Simulated(_) => "sim",
            Backend::Http(_) => "http",
        }
    }

    pub async fn complete(
        &self,
        prompt: &str,
        max_new_tokens: u32,
        on_token: &mut TokenSink<'_>,
    ) -> Result<Completion, BackendError> {
        match self {
            Backend::Simulated(b) => b.complete(prompt, max_new_tokens, on_token).await,
            Backend::Http(b) => b.complete(prompt, max_new_tokens, on_token).await,
        }
    }

    pub async fn score(&self, req: &ScoreRequest) -> Result<f64, BackendError> {
        match self {
            Backend::Simulated(b) => b.score(req),
            Backend::Http(b) => b.score(req).await,
        }
    }

    pub async fn probe(&self) -> ProbeResult {
        match self {
            Backend::Simulated(_) => ProbeResult {
                alive: true,
                reported_model: None,
            },
            Backend::Http(b) => b.probe().await,
        }
    }
}
