//! Client for llama.cpp-server-style HTTP backends.
//!
//! Wire shapes (llama.cpp `server`, 2024-era API):
//!
//! * `POST /completion` with `{"prompt", "n_predict", "stream": true}` answers
//!   with server-sent events, one `data: {"content": "...", "stop": false}`
//!   line per token. The final chunk has `"stop": true` and carries a
//!   `timings` object with `prompt_n`, `prompt_ms`, `predicted_n` and
//!   `predicted_ms`, plus `stop_type` (`"limit"` when the budget ran out) or
//!   the older boolean `stopped_limit`.
//! * `GET /health` answers 2xx when the server is ready.
//! * `GET /v1/models` lists the loaded model as `data[0].id`.
//! * Scoring uses the OpenAI-style `POST /v1/completions` with `echo: true`,
//!   `max_tokens: 0` and `logprobs: 1`, as served by vLLM and the
//!   lm-evaluation-harness local server. Servers without it report
//!   `CapabilityMissing`.

use std::time::Duration;

use futures::StreamExt;
use serde::Deserialize;
use serde_json::{json, Value};

use super::{
    BackendError, BackendTimings, Completion, FinishReason, ProbeResult, ScoreRequest, TokenSink,
};

const PROBE_TIMEOUT: Duration = Duration::from_secs(2);

#[derive(Debug, Clone)]
pub struct HttpBackend {
    base: String,
    client: reqwest::Client,
}

#[derive(Debug, Deserialize)]
struct Chunk {
    #[serde(default)]
    content: String,
    #[serde(default)]
    stop: bool,
    #[serde(default)]
    stop_type: Option<String>,
    #[serde(default)]
    stopped_limit: Option<bool>,
    #[serde(default)]
    timings: Option<Value>,
}

#[derive(Debug, Deserialize)]
struct RawTimings {
    prompt_n: u64,
    prompt_ms: f64,
    predicted_n: u64,
    predicted_ms: f64,
}

impl HttpBackend {
    pub fn new(url: &str) -> Self {
        let client = reqwest::Client::builder()
            .connect_timeout(Duration::from_secs(5))
            .build()
            .expect("http client");
        HttpBackend {
            base: url.trim_end_matches('/').to_string(),
            client,
        }
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    pub async fn complete(
        &self,
        prompt: &str,
        max_new_tokens: u32,
        on_token: &mut TokenSink<'_>,
    ) -> Result<Completion, BackendError> {
        let resp = self
            .client
            .post(format!("{}/completion", self.base))
            .json(&json!({
                "prompt": prompt,
                "n_predict": max_new_tokens,
                "stream": true,
                "cache_prompt": false,
            }))
            .send()
            .await
            .map_err(unavailable)?;
        if !resp.status().is_success() {
            return Err(BackendError::BackendUnavailable(format!(
                "completion returned {}",
                resp.status()
            )));
        }

        let mut text = String::new();
        let mut token_count = 0u64;
        let mut final_chunk: Option<Chunk> = None;
        let mut buf: Vec<u8> = Vec::new();
        let mut body = resp.bytes_stream();

        'read: while let Some(bytes) = body.next().await {
            buf.extend_from_slice(&bytes.map_err(unavailable)?);
            while let Some(nl) = buf.iter().position(|b| *b == b'\n') {
                let line: Vec<u8> = buf.drain(..=nl).collect();
                let line = String::from_utf8_lossy(&line);
                let Some(data) = line.trim_end().strip_prefix("data:") else {
                    continue;
                };
                let data = data.trim_start();
                if data.is_empty() || data == "[DONE]" {
                    continue;
                }
                let chunk: Chunk = serde_json::from_str(data)
                    .map_err(|e| BackendError::ProtocolError(format!("bad chunk {data:?}: {e}")))?;
                if !chunk.content.is_empty() {
                    token_count += 1;
                    text.push_str(&chunk.content);
                    if on_token(&chunk.content).is_break() {
                        return Err(BackendError::Cancelled);
                    }
                }
                if chunk.stop {
                    final_chunk = Some(chunk);
                    break 'read;
                }
            }
        }

        let Some(last) = final_chunk else {
            return Err(BackendError::BackendUnavailable(
                "stream ended without a stop chunk".into(),
            ));
        };
        let hit_limit = last.stop_type.as_deref() == Some("limit")
            || last.stopped_limit == Some(true)
            || token_count >= u64::from(max_new_tokens);
        let (timings, protocol_error) = match last.timings.map(parse_timings) {
            Some(Ok(t)) => (Some(t), None),
            Some(Err(e)) => (None, Some(e)),
            None => (None, None),
        };
        Ok(Completion {
            text,
            token_count,
            timings,
            finish: if hit_limit {
                FinishReason::MaxTokens
            } else {
                FinishReason::Stop
            },
            protocol_error,
        })
    }

    pub async fn score(&self, req: &ScoreRequest) -> Result<f64, BackendError> {
        if req.continuation.is_empty() {
            return Err(BackendError::InvalidRequest("continuation is empty".into()));
        }
        let resp = self
            .client
            .post(format!("{}/v1/completions", self.base))
            .json(&json!({
                "prompt": format!("{}{}", req.context, req.continuation),
                "max_tokens": 0,
                "echo": true,
                "logprobs": 1,
                "temperature": 0,
            }))
            .send()
            .await
            .map_err(unavailable)?;
        let status = resp.status();
        if matches!(status.as_u16(), 404 | 405 | 501) {
            return Err(BackendError::CapabilityMissing(format!(
                "scoring endpoint returned {status}"
            )));
        }
        if !status.is_success() {
            return Err(BackendError::BackendUnavailable(format!("scoring returned {status}")));
        }
        let body: Value = resp.json().await.map_err(unavailable)?;
        let lp = &body["choices"][0]["logprobs"];
        let (Some(lps), Some(offsets)) = (lp["token_logprobs"].as_array(), lp["text_offset"].as_array())
        else {
            return Err(BackendError::CapabilityMissing(
                "response carries no prompt logprobs".into(),
            ));
        };
        // Offsets are character positions into the echoed prompt.
        let boundary = req.context.chars().count() as u64;
        let mut total = 0.0;
        let mut counted = 0;
        for (lp, off) in lps.iter().zip(offsets) {
            let off = off
                .as_u64()
                .ok_or_else(|| BackendError::ProtocolError("bad text_offset".into()))?;
            if off < boundary {
                continue;
            }
            let v = lp
                .as_f64()
                .ok_or_else(|| BackendError::ProtocolError("missing continuation logprob".into()))?;
            total += v;
            counted += 1;
        }
        if counted == 0 {
            return Err(BackendError::ProtocolError("no continuation tokens scored".into()));
        }
        Ok(total)
    }

    pub async fn probe(&self) -> ProbeResult {
        let alive = matches!(
            self.client
                .get(format!("{}/health", self.base))
                .timeout(PROBE_TIMEOUT)
                .send()
                .await,
            Ok(r) if r.status().is_success()
        );
        if !alive {
            return ProbeResult {
                alive,
                reported_model: None,
            };
        }
        let reported_model = async {
            let v: Value = self
                .client
                .get(format!("{}/v1/models", self.base))
                .timeout(PROBE_TIMEOUT)
                .send()
                .await
                .ok()?
                .json()
                .await
                .ok()?;
            v["data"][0]["id"].as_str().map(str::to_string)
        }
        .await;
        ProbeResult {
            alive,
            reported_model,
        }
    }
}

fn unavailable(e: reqwest::Error) -> BackendError {
    BackendError::BackendUnavailable(e.to_string())
}

fn parse_timings(v: Value) -> Result<BackendTimings, String> {
    let raw: RawTimings =
        serde_json::from_value(v).map_err(|e| format!("malformed timing block: {e}"))?;
    let t = BackendTimings {
        prompt_tokens: raw.prompt_n,
        prompt_ms: raw.prompt_ms,
        generated_tokens: raw.predicted_n,
        generation_ms: raw.predicted_ms,
    };
    if t.is_valid() {
        Ok(t)
    } else {
        Err("timing block has negative or non-finite durations".into())
    }
}
