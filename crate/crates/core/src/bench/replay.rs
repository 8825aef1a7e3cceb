use std::collections::BTreeMap;
use std::future::Future;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{BenchError, Conversation, RunConfig, RunRecord};
use crate::backends::FinishReason;
use crate::gateway::client::GatewayClient;
use crate::gateway::{ChatRequest, CompletionResult, Gateway, GatewayError, Message};
use crate::monitor::{run_sampler, summarize, ResourceSummary, VecSink};

/// Anything that can answer a non-streaming chat request: an in-process
/// [`Gateway`] or a [`GatewayClient`] pointed at a served one.
pub trait ChatClient {
    fn chat(&self, request: ChatRequest)
        -> impl Future<Output = Result<CompletionResult, GatewayError>>;
}

impl ChatClient for Gateway {
    fn chat(
        &self,
        request: ChatRequest,
    ) -> impl Future<Output = Result<CompletionResult, GatewayError>> {
        Gateway::chat(self, request)
    }
}

impl ChatClient for GatewayClient {
    fn chat(
        &self,
        request: ChatRequest,
    ) -> impl Future<Output = Result<CompletionResult, GatewayError>> {
        GatewayClient::chat(self, request)
    }
}

impl<T: ChatClient> ChatClient for Arc<T> {
    fn chat(
        &self,
        request: ChatRequest,
    ) -> impl Future<Output = Result<CompletionResult, GatewayError>> {
        T::chat(self, request)
    }
}

/// A model whose failed requests exceeded half of those attempted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRunFailed {
    pub model: String,
    pub failed: u64,
    pub attempted: u64,
}

impl std::fmt::Display for ModelRunFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "model {} failed {} of {} requests",
            self.model, self.failed, self.attempted
        )
    }
}

#[derive(Debug, Clone, Default)]
pub struct ReplayOutcome {
    pub records: Vec<RunRecord>,
    /// Requests that produced no record at all, per model.
    pub unrecorded: BTreeMap<String, u64>,
    pub failed_models: Vec<ModelRunFailed>,
    pub resources: BTreeMap<String, ResourceSummary>,
}

impl ReplayOutcome {
    pub fn unrecorded_total(&self) -> u64 {
        self.unrecorded.values().sum()
    }
}

/// Replays every conversation against every model, one request in flight.
///
/// Order is model, repetition, conversation, turn. Each request carries the
/// conversation so far, including the replies generated earlier in the same
/// repetition. A backend failure is kept as a record with finish reason
/// `BackendError`; a request rejected before reaching the backend leaves no
/// record and is counted in `unrecorded`.
pub async fn replay<C: ChatClient>(
    config: &RunConfig,
    conversations: &[Conversation],
    client: &C,
) -> Result<ReplayOutcome, BenchError> {
    config.validate()?;
    if conversations.is_empty() {
        return Err(BenchError::InvalidConfig("dataset has no conversations".into()));
    }
    let turns_per_rep: u64 = conversations.iter().map(|c| c.turns.len() as u64).sum();
    let mut out = ReplayOutcome::default();

    for model in &config.models {
        for _ in 0..config.warmup_requests {
            let req = request(config, model, vec![Message::user(&conversations[0].turns[0])]);
            if let Err(e) = client.chat(req).await {
                tracing::warn!(%model, "warmup request failed: {e}");
            }
        }

        let sampler = if config.monitor_resources {
            let sink = Arc::new(VecSink::default());
            let pid = config.monitor_pid.unwrap_or_else(std::process::id);
            match run_sampler(pid, config.monitor_interval_ms, sink.clone()) {
                Ok(h) => Some((h, sink)),
                Err(e) => {
                    tracing::warn!(%model, "resource sampling unavailable: {e}");
                    None
                }
            }
        } else {
            None
        };

        let mut failed = 0u64;
        let mut unrecorded = 0u64;
        for rep in 1..=config.repetitions {
            for conv in conversations {
                let mut history: Vec<Message> = Vec::with_capacity(conv.turns.len() * 2);
                for (t, prompt) in conv.turns.iter().enumerate() {
                    history.push(Message::user(prompt));
                    let turn = t as u32 + 1;
                    let result = match client.chat(request(config, model, history.clone())).await {
                        Ok(r) => r,
                        Err(GatewayError::Upstream { message, partial }) => {
                            tracing::warn!(%model, conversation = %conv.id, turn, "{message}");
                            *partial
                        }
                        Err(e) => {
                            tracing::warn!(%model, conversation = %conv.id, turn, "request rejected: {e}");
                            failed += 1;
                            unrecorded += 1;
                            continue;
                        }
                    };
                    if result.finish_reason == FinishReason::BackendError {
                        failed += 1;
                    }
                    if !result.text.is_empty() {
                        history.push(Message::assistant(&result.text));
                    }
                    out.records.push(RunRecord::new(
                        model,
                        &conv.id,
                        turn,
                        rep,
                        result.timing,
                        result.started_at,
                        result.finish_reason,
                    ));
                }
            }
        }

        if let Some((mut handle, sink)) = sampler {
            handle.stop();
            match summarize(&sink.samples()) {
                Ok(s) => {
                    out.resources.insert(model.clone(), s);
                }
                Err(_) => tracing::info!(%model, "run too short for a resource sample"),
            }
        }

        let attempted = config.repetitions as u64 * turns_per_rep;
        if unrecorded > 0 {
            out.unrecorded.insert(model.clone(), unrecorded);
        }
        if failed * 2 > attempted {
            out.failed_models.push(ModelRunFailed {
                model: model.clone(),
                failed,
                attempted,
            });
        }
    }
    Ok(out)
}

fn request(config: &RunConfig, model: &str, messages: Vec<Message>) -> ChatRequest {
    let mut r = ChatRequest::new(model, messages);
    r.max_new_tokens = config.max_new_tokens;
    r
}
