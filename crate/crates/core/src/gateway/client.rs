//! Client for a gateway served over HTTP.

use std::ops::ControlFlow;

use futures::StreamExt;
use serde_json::Value;

use super::{ChatRequest, CompletionResult, GatewayError, TokenEvent};
use crate::registry::ModelDescriptor;

#[derive(Debug, Clone)]
pub struct GatewayClient {
    base: String,
    client: reqwest::Client,
}

impl GatewayClient {
    pub fn new(base: &str) -> Self {
        GatewayClient {
            base: base.trim_end_matches('/').to_string(),
            client: reqwest::Client::new(),
        }
    }

    fn transport(e: reqwest::Error) -> GatewayError {
        GatewayError::InvalidRequest(format!("gateway transport: {e}"))
    }

    pub async fn health(&self) -> bool {
        matches!(
            self.client.get(format!("{}/healthz", self.base)).send().await,
            Ok(r) if r.status().is_success()
        )
    }

    pub async fn models(&self) -> Result<Vec<ModelDescriptor>, GatewayError> {
        self.client
            .get(format!("{}/v1/models", self.base))
            .send()
            .await
            .map_err(Self::transport)?
            .json()
            .await
            .map_err(Self::transport)
    }

    pub async fn metrics_text(&self) -> Result<String, GatewayError> {
        self.client
            .get(format!("{}/metrics", self.base))
            .send()
            .await
            .map_err(Self::transport)?
            .text()
            .await
            .map_err(Self::transport)
    }

    /// Non-streaming chat.
    pub async fn chat(&self, mut req: ChatRequest) -> Result<CompletionResult, GatewayError> {
        req.stream = false;
        let resp = self
            .client
            .post(format!("{}/v1/chat", self.base))
            .json(&req)
            .send()
            .await
            .map_err(Self::transport)?;
        let status = resp.status().as_u16();
        let body: Value = resp.json().await.map_err(Self::transport)?;
        if status == 200 {
            return serde_json::from_value(body)
                .map_err(|e| GatewayError::InvalidRequest(format!("bad completion body: {e}")));
        }
        Err(error_from_body(status, &req.model, body))
    }

    /// Streaming chat; `on_token` sees each `token` event in arrival order.
    pub async fn chat_stream(
        &self,
        mut req: ChatRequest,
        on_token: &mut (dyn FnMut(TokenEvent) -> ControlFlow<()> + Send),
    ) -> Result<CompletionResult, GatewayError> {
        req.stream = true;
        let resp = self
            .client
            .post(format!("{}/v1/chat", self.base))
            .json(&req)
            .send()
            .await
            .map_err(Self::transport)?;
        let status = resp.status().as_u16();
        if status != 200 {
            let body: Value = resp.json().await.map_err(Self::transport)?;
            return Err(error_from_body(status, &req.model, body));
        }

        let mut body = resp.bytes_stream();
        let mut buf = String::new();
        let mut event_name = String::new();
        let mut data = String::new();
        while let Some(chunk) = body.next().await {
            buf.push_str(&String::from_utf8_lossy(&chunk.map_err(Self::transport)?));
            while let Some(nl) = buf.find('\n') {
                let line: String = buf.drain(..=nl).collect();
                let line = line.trim_end_matches(['\n', '\r']);
                if let Some(v) = line.strip_prefix("event:") {
                    event_name = v.trim().to_string();
                } else if let Some(v) = line.strip_prefix("data:") {
                    data.push_str(v.strip_prefix(' ').unwrap_or(v));
                } else if line.is_empty() && !data.is_empty() {
                    let payload = std::mem::take(&mut data);
                    match event_name.as_str() {
                        "token" => {
                            let ev: TokenEvent = serde_json::from_str(&payload).map_err(|e| {
                                GatewayError::InvalidRequest(format!("bad token event: {e}"))
                            })?;
                            if on_token(ev).is_break() {
                                return Err(GatewayError::Cancelled);
                            }
                        }
                        "done" => {
                            return serde_json::from_str(&payload).map_err(|e| {
                                GatewayError::InvalidRequest(format!("bad done event: {e}"))
                            });
                        }
                        _ => {}
                    }
                }
            }
        }
        Err(GatewayError::InvalidRequest("stream ended without done event".into()))
    }
}

fn error_from_body(status: u16, model: &str, body: Value) -> GatewayError {
    let msg = body["error"].as_str().unwrap_or("unknown error").to_string();
    match status {
        404 => GatewayError::ModelNotFound(model.to_string()),
        413 => GatewayError::ContextOverflow {
            prompt_tokens: body["prompt_tokens"].as_u64().unwrap_or(0),
            max_context_tokens: body["max_context_tokens"].as_u64().unwrap_or(0),
        },
        502 => match serde_json::from_value::<CompletionResult>(body["result"].clone()) {
            Ok(partial) => GatewayError::Upstream {
                message: msg,
                partial: Box::new(partial),
            },
            Err(_) => GatewayError::InvalidRequest(msg),
        },
        _ => GatewayError::InvalidRequest(msg),
    }
}
