//! The chat path: validate a request, assemble the prompt, proxy it to the
//! model's backend, re-emit tokens in order and derive phase timings.
//!
//! [`Gateway`] is transport-agnostic; [`server`] mounts it on HTTP and
//! [`client`] talks to a mounted gateway.

pub mod client;
pub mod server;

use std::collections::{BTreeMap, HashMap};
use std::ops::ControlFlow;
use std::sync::{Arc, LazyLock, Mutex, RwLock};
use std::time::Instant;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{Backend, BackendError, BackendTimings, FinishReason};
use crate::metrics::{PhaseTiming, ThroughputSample};
use crate::monitor::prometheus::{MetricKind, Snapshot};
use crate::monitor::ResourceBoard;
use crate::registry::{ChatTemplate, ModelDescriptor, Registry, RegistryError};
use crate::text::word_count;

pub const DEFAULT_MAX_NEW_TOKENS: u32 = 500;

static EPOCH: LazyLock<Instant> = LazyLock::new(Instant::now);

/// Monotonic nanoseconds since the first call in this process.
pub fn mono_ns() -> u64 {
    EPOCH.elapsed().as_nanos() as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    fn label(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub text: String,
}

impl Message {
    pub fn user(text: impl Into<String>) -> Self {
        Message {
            role: Role::User,
            text: text.into(),
        }
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        Message {
            role: Role::Assistant,
            text: text.into(),
        }
    }
}

fn default_max_new_tokens() -> u32 {
    DEFAULT_MAX_NEW_TOKENS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<Message>,
    #[serde(default = "default_max_new_tokens")]
    pub max_new_tokens: u32,
    #[serde(default)]
    pub stream: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub request_id: Option<String>,
}

impl ChatRequest {
    pub fn new(model: impl Into<String>, messages: Vec<Message>) -> Self {
        ChatRequest {
            model: model.into(),
            messages,
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
            stream: false,
            request_id: None,
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        match self.messages.last() {
            None => Err(GatewayError::InvalidRequest("messages is empty".into())),
            Some(m) if m.role != Role::User => Err(GatewayError::InvalidRequest(
                "last message must have role user".into(),
            )),
            _ if self.max_new_tokens == 0 => Err(GatewayError::InvalidRequest(
                "max_new_tokens must be at least 1".into(),
            )),
            _ => Ok(()),
        }
    }
}

/// One streamed token. `at_ns` is a monotonic timestamp and stays off the
/// wire.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenEvent {
    pub index: u64,
    pub text: String,
    #[serde(skip)]
    pub at_ns: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResult {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub request_id: Option<String>,
    pub model: String,
    pub text: String,
    pub timing: PhaseTiming,
    pub finish_reason: FinishReason,
    pub started_at: DateTime<Utc>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GatewayError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("model {0:?} not found")]
    ModelNotFound(String),
    #[error("prompt of {prompt_tokens} tokens exceeds context window of {max_context_tokens}")]
    ContextOverflow {
        prompt_tokens: u64,
        max_context_tokens: u64,
    },
    #[error("upstream failure: {message}")]
    Upstream {
        message: String,
        partial: Box<CompletionResult>,
    },
    #[error("client went away")]
    Cancelled,
    #[error("timing: {0}")]
    Timing(#[from] TimingError),
}

impl GatewayError {
    /// HTTP status the server answers with.
    pub fn status(&self) -> u16 {
        match self {
            GatewayError::InvalidRequest(_) => 400,
            GatewayError::ModelNotFound(_) => 404,
            GatewayError::ContextOverflow { .. } => 413,
            GatewayError::Upstream { .. } => 502,
            GatewayError::Cancelled => 499,
            GatewayError::Timing(_) => 500,
        }
    }
}

#[derive(Debug, Error, Clone, Copy, PartialEq)]
pub enum TimingError {
    #[error("timestamps out of order: dispatch {dispatch_ns}, first token {first_ns}, last token {last_ns}")]
    ClockSkew {
        dispatch_ns: u64,
        first_ns: u64,
        last_ns: u64,
    },
}

/// Renders a conversation into a single prompt and estimates its size in
/// whitespace tokens.
pub fn build_prompt(history: &[Message], template: ChatTemplate) -> (String, u64) {
    let prompt = match template {
        ChatTemplate::Generic => {
            let mut s = String::new();
            for m in history {
                s.push_str(m.role.label());
                s.push_str(": ");
                s.push_str(&m.text);
                s.push('\n');
            }
            s.push_str("assistant:");
            s
        }
        ChatTemplate::Passthrough => history
            .iter()
            .map(|m| m.text.as_str())
            .collect::<Vec<_>>()
            .join("\n"),
    };
    let estimate = word_count(&prompt) as u64;
    (prompt, estimate)
}

/// Splits a completion into prefill and decode.
///
/// Backend-reported timings win when present. Otherwise time-to-first-token
/// stands in for prefill and the rest of the stream for decode, with token
/// counts from the gateway's own bookkeeping.
pub fn derive_phase_timing(
    dispatch_ns: u64,
    first_token_ns: u64,
    last_token_ns: u64,
    backend: Option<&BackendTimings>,
    streamed_tokens: u64,
    prompt_token_estimate: u64,
) -> Result<PhaseTiming, TimingError> {
    if !(dispatch_ns <= first_token_ns && first_token_ns <= last_token_ns) {
        return Err(TimingError::ClockSkew {
            dispatch_ns,
            first_ns: first_token_ns,
            last_ns: last_token_ns,
        });
    }
    Ok(match backend {
        Some(b) => PhaseTiming::new(b.prompt_tokens, b.prompt_ms, b.generated_tokens, b.generation_ms),
        None => PhaseTiming::new(
            prompt_token_estimate,
            (first_token_ns - dispatch_ns) as f64 / 1e6,
            streamed_tokens,
            (last_token_ns - first_token_ns) as f64 / 1e6,
        ),
    })
}

/// Receives every finished completion, successful or not.
pub trait CompletionSink: Send + Sync {
    fn record(&self, result: &CompletionResult, backend_kind: &str);
}

/// Appends completions to an in-memory log.
#[derive(Debug, Default)]
pub struct CompletionLog {
    entries: Mutex<Vec<CompletionResult>>,
}

impl CompletionLog {
    pub fn snapshot(&self) -> Vec<CompletionResult> {
        self.entries.lock().unwrap().clone()
    }
}

impl CompletionSink for CompletionLog {
    fn record(&self, result: &CompletionResult, _backend_kind: &str) {
        self.entries.lock().unwrap().push(result.clone());
    }
}

#[derive(Debug, Default, Clone)]
struct ModelCounters {
    backend_kind: String,
    requests_total: u64,
    last: Option<ThroughputSample>,
}

struct Pool {
    registry: Arc<Registry>,
    backends: HashMap<String, Arc<Backend>>,
}

impl Pool {
    fn new(registry: Registry) -> Self {
        let backends = registry
            .models()
            .iter()
            .map(|m| (m.name.clone(), Arc::new(Backend::from_endpoint(&m.backend))))
            .collect();
        Pool {
            registry: Arc::new(registry),
            backends,
        }
    }
}

/// A prepared request: validated, routed and rendered, ready to dispatch.
pub struct Prepared {
    request: ChatRequest,
    backend: Arc<Backend>,
    prompt: String,
    prompt_token_estimate: u64,
}

impl Prepared {
    pub fn prompt(&self) -> &str {
        &self.prompt
    }

    pub fn prompt_token_estimate(&self) -> u64 {
        self.prompt_token_estimate
    }
}

pub struct Gateway {
    pool: RwLock<Arc<Pool>>,
    sinks: Vec<Arc<dyn CompletionSink>>,
    counters: Mutex<BTreeMap<String, ModelCounters>>,
    resources: Arc<ResourceBoard>,
}

impl Gateway {
    pub fn new(registry: Registry) -> Self {
        Gateway {
            pool: RwLock::new(Arc::new(Pool::new(registry))),
            sinks: Vec::new(),
            counters: Mutex::new(BTreeMap::new()),
            resources: Arc::new(ResourceBoard::default()),
        }
    }

    pub fn with_sink(mut self, sink: Arc<dyn CompletionSink>) -> Self {
        self.sinks.push(sink);
        self
    }

    pub fn resource_board(&self) -> Arc<ResourceBoard> {
        Arc::clone(&self.resources)
    }

    /// Swaps in a new registry. In-flight requests finish on the old one.
    pub fn reload(&self, registry: Registry) {
        *self.pool.write().unwrap() = Arc::new(Pool::new(registry));
    }

    pub fn registry(&self) -> Arc<Registry> {
        Arc::clone(&self.current().registry)
    }

    fn current(&self) -> Arc<Pool> {
        Arc::clone(&self.pool.read().unwrap())
    }

    pub fn backend(&self, model: &str) -> Option<Arc<Backend>> {
        self.current().backends.get(model).cloned()
    }

    pub fn list_models(&self) -> Vec<ModelDescriptor> {
        self.current().registry.descriptors()
    }

    pub fn prepare(&self, request: ChatRequest) -> Result<Prepared, GatewayError> {
        request.validate()?;
        let pool = self.current();
        let spec = pool.registry.get(&request.model).map_err(|e| match e {
            RegistryError::ModelNotFound(n) => GatewayError::ModelNotFound(n),
            other => GatewayError::InvalidRequest(other.to_string()),
        })?;
        let (prompt, estimate) = build_prompt(&request.messages, spec.chat_template);
        if estimate > spec.max_context_tokens {
            return Err(GatewayError::ContextOverflow {
                prompt_tokens: estimate,
                max_context_tokens: spec.max_context_tokens,
            });
        }
        let backend = Arc::clone(&pool.backends[&spec.name]);
        Ok(Prepared {
            request,
            backend,
            prompt,
            prompt_token_estimate: estimate,
        })
    }

    /// Runs a prepared request, handing each token to `on_event` as it
    /// arrives. A `Break` from `on_event` abandons the request.
    pub async fn execute(
        &self,
        prepared: Prepared,
        on_event: &mut (dyn FnMut(TokenEvent) -> ControlFlow<()> + Send),
    ) -> Result<CompletionResult, GatewayError> {
        let Prepared {
            request,
            backend,
            prompt,
            prompt_token_estimate,
        } = prepared;
        let started_at = Utc::now();
        let dispatch = mono_ns();
        let mut first: Option<u64> = None;
        let mut last = dispatch;
        let mut streamed = 0u64;
        let mut text = String::new();

        let outcome = {
            let mut sink = |piece: &str| {
                let now = mono_ns();
                first.get_or_insert(now);
                last = now;
                text.push_str(piece);
                let ev = TokenEvent {
                    index: streamed,
                    text: piece.to_string(),
                    at_ns: now,
                };
                streamed += 1;
                on_event(ev)
            };
            backend
                .complete(&prompt, request.max_new_tokens, &mut sink)
                .await
        };
        let end = mono_ns();
        let first = first.unwrap_or(end);
        let last = if streamed == 0 { end } else { last };

        let result = |timing: PhaseTiming, finish_reason, text: String| CompletionResult {
            request_id: request.request_id.clone(),
            model: request.model.clone(),
            text,
            timing,
            finish_reason,
            started_at,
        };

        match outcome {
            Ok(c) => {
                if let Some(e) = &c.protocol_error {
                    tracing::warn!(model = %request.model, "{e}; falling back to wall-clock timing");
                }
                let timing = derive_phase_timing(
                    dispatch,
                    first,
                    last,
                    c.timings.as_ref(),
                    streamed,
                    prompt_token_estimate,
                )?;
                let r = result(timing, c.finish, c.text);
                self.observe(&r, backend.kind_label());
                Ok(r)
            }
            Err(BackendError::Cancelled) => Err(GatewayError::Cancelled),
            Err(e) => {
                let timing =
                    derive_phase_timing(dispatch, first, last, None, streamed, prompt_token_estimate)?;
                let r = result(timing, FinishReason::BackendError, text);
                self.observe(&r, backend.kind_label());
                Err(GatewayError::Upstream {
                    message: e.to_string(),
                    partial: Box::new(r),
                })
            }
        }
    }

    pub async fn handle_chat(
        &self,
        request: ChatRequest,
        on_event: &mut (dyn FnMut(TokenEvent) -> ControlFlow<()> + Send),
    ) -> Result<CompletionResult, GatewayError> {
        let prepared = self.prepare(request)?;
        self.execute(prepared, on_event).await
    }

    /// Non-streaming convenience wrapper.
    pub async fn chat(&self, request: ChatRequest) -> Result<CompletionResult, GatewayError> {
        self.handle_chat(request, &mut |_| ControlFlow::Continue(())).await
    }

    fn observe(&self, r: &CompletionResult, backend_kind: &str) {
        {
            let mut counters = self.counters.lock().unwrap();
            let c = counters.entry(r.model.clone()).or_default();
            c.backend_kind = backend_kind.to_string();
            c.requests_total += 1;
            if r.finish_reason != FinishReason::BackendError {
                c.last = Some(ThroughputSample::from_timing(&r.timing));
            }
        }
        for s in &self.sinks {
            s.record(r, backend_kind);
        }
    }

    /// Point-in-time gauge set for `/metrics`.
    pub fn metrics_snapshot(&self) -> Snapshot {
        let mut snap = Snapshot::default();
        let pool = self.current();
        let kind_of = |model: &str| {
            pool.backends
                .get(model)
                .map(|b| b.kind_label().to_string())
                .unwrap_or_default()
        };
        for (model, sample) in self.resources.latest() {
            let labels = [("model", model.as_str()), ("backend_kind", &kind_of(&model))];
            snap.set(MetricKind::Gauge, "edgellm_cpu_total_fraction", &labels, sample.cpu_total_fraction);
            snap.set(MetricKind::Gauge, "edgellm_cpu_core_fraction", &labels, sample.cpu_core_fraction);
            snap.set(MetricKind::Gauge, "edgellm_rss_bytes", &labels, sample.rss_bytes as f64);
        }
        for (model, c) in self.counters.lock().unwrap().iter() {
            let labels = [("model", model.as_str()), ("backend_kind", c.backend_kind.as_str())];
            snap.set(MetricKind::Counter, "edgellm_requests_total", &labels, c.requests_total as f64);
            if let Some(t) = c.last {
                if let Some(v) = t.prefill_tps {
                    snap.set(MetricKind::Gauge, "edgellm_prefill_tokens_per_second", &labels, v);
                }
                if let Some(v) = t.decode_tps {
                    snap.set(MetricKind::Gauge, "edgellm_decode_tokens_per_second", &labels, v);
                }
            }
        }
        snap
    }
}
