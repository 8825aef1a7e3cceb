mod common;

use std::ops::ControlFlow;
use std::sync::Arc;

use common::{dead_port, http_model, registry, sim_model, spawn_stub, Stub};
use edgellm_core::backends::{Backend, BackendError, FinishReason, HttpBackend, ScoreRequest, SimConfig};
use edgellm_core::gateway::client::GatewayClient;
use edgellm_core::gateway::server::spawn_local;
use edgellm_core::gateway::{ChatRequest, Gateway, GatewayError, Message, TokenEvent};
use edgellm_core::metrics::PhaseTiming;
use edgellm_core::registry::BackendEndpoint;
use serde_json::json;

async fn served(models: Vec<serde_json::Value>) -> (GatewayClient, String) {
    let gw = Arc::new(Gateway::new(registry(models)));
    let addr = spawn_local(gw).await.unwrap();
    let base = format!("http://{addr}");
    (GatewayClient::new(&base), base)
}

fn ask(model: &str, text: &str) -> ChatRequest {
    ChatRequest::new(model, vec![Message::user(text)])
}

#[tokio::test]
async fn timing_block_is_relayed_verbatim() {
    let stub = spawn_stub(Stub::default()).await;
    let (client, _) = served(vec![http_model("Stub", &format!("http://{stub}"), 7.0)]).await;
    let r = client.chat(ask("Stub", "say hello")).await.unwrap();
    assert_eq!(r.text, "Hello, edge world");
    assert_eq!(r.timing, PhaseTiming::new(17, 523.25, 4, 901.5));
    assert_eq!(r.timing.total_ms, r.timing.prefill_ms + r.timing.decode_ms);
    assert_eq!(r.finish_reason, FinishReason::Stop);
}

#[tokio::test]
async fn streamed_matches_non_streamed() {
    let stub = spawn_stub(Stub::default()).await;
    let (client, _) = served(vec![
        http_model("Stub", &format!("http://{stub}"), 7.0),
        sim_model("Sim", 1.5, &SimConfig::new(13.79, 40.0)),
    ])
    .await;
    for model in ["Stub", "Sim"] {
        let plain = client.chat(ask(model, "one two three")).await.unwrap();
        let mut events: Vec<TokenEvent> = Vec::new();
        let streamed = client
            .chat_stream(ask(model, "one two three"), &mut |e| {
                events.push(e);
                ControlFlow::Continue(())
            })
            .await
            .unwrap();
        assert_eq!(plain.text, streamed.text, "{model}");
        assert_eq!(plain.timing, streamed.timing, "{model}");
        let joined: String = events.iter().map(|e| e.text.as_str()).collect();
        assert_eq!(joined, streamed.text);
        assert!(events.iter().enumerate().all(|(i, e)| e.index == i as u64));
        assert_eq!(streamed.timing.total_ms, streamed.timing.prefill_ms + streamed.timing.decode_ms);
    }
}

#[tokio::test]
async fn token_budget_maps_to_max_tokens() {
    let stub = spawn_stub(Stub::default()).await;
    let (client, _) = served(vec![http_model("Stub", &format!("http://{stub}"), 7.0)]).await;
    let mut req = ask("Stub", "hi");
    req.max_new_tokens = 2;
    let r = client.chat(req).await.unwrap();
    assert_eq!(r.text, "Hello,");
    assert_eq!(r.finish_reason, FinishReason::MaxTokens);
}

#[tokio::test]
async fn malformed_timings_fall_back_to_wall_clock() {
    let stub = spawn_stub(Stub {
        timings: json!({"prompt_n": "many"}),
        ..Stub::default()
    })
    .await;
    let (client, _) = served(vec![http_model("Stub", &format!("http://{stub}"), 7.0)]).await;
    let r = client.chat(ask("Stub", "a b c")).await.unwrap();
    assert_eq!(r.text, "Hello, edge world");
    assert_eq!(r.timing.generated_tokens, 4);
    // "user: a b c\nassistant:" under the generic template.
    assert_eq!(r.timing.prompt_tokens, 5);
    assert_eq!(r.timing.total_ms, r.timing.prefill_ms + r.timing.decode_ms);
}

#[tokio::test]
async fn error_statuses() {
    let (client, base) = served(vec![
        http_model("Dead", &format!("http://{}", dead_port()), 7.0),
        json!({"name": "Tiny", "params_billions": 1.0, "quantization": "Q4_K_M",
               "backend": {"kind": "sim", "sim": SimConfig::new(1.0, 1.0)}, "max_context_tokens": 4}),
    ])
    .await;

    assert!(matches!(client.chat(ask("GPT9", "hi")).await, Err(GatewayError::ModelNotFound(m)) if m == "GPT9"));
    match client.chat(ask("Tiny", "far too many words here")).await {
        Err(GatewayError::ContextOverflow { prompt_tokens, max_context_tokens }) => {
            assert_eq!((prompt_tokens, max_context_tokens), (7, 4));
        }
        other => panic!("{other:?}"),
    }
    match client.chat(ask("Dead", "hi")).await {
        Err(GatewayError::Upstream { partial, .. }) => {
            assert_eq!(partial.finish_reason, FinishReason::BackendError);
            assert_eq!(partial.text, "");
        }
        other => panic!("{other:?}"),
    }

    let http = reqwest::Client::new();
    let status = |body: &'static str| {
        let http = http.clone();
        let url = format!("{base}/v1/chat");
        async move {
            http.post(url)
                .header("content-type", "application/json")
                .body(body)
                .send()
                .await
                .unwrap()
                .status()
                .as_u16()
        }
    };
    assert_eq!(status(r#"{"model":"GPT9","messages":[{"role":"user","text":"x"}]}"#).await, 404);
    assert_eq!(status(r#"{"model":"Tiny","messages":[]}"#).await, 400);
    assert_eq!(status("not json").await, 400);
    assert_eq!(status(r#"{"model":"Dead","messages":[{"role":"user","text":"x"}]}"#).await, 502);
}

#[tokio::test]
async fn models_health_and_metrics() {
    let (client, base) = served(vec![
        sim_model("Yi", 1.48, &SimConfig::new(13.79, 40.0)),
        http_model("Stub", "http://10.0.0.9:8080", 7.74),
    ])
    .await;
    assert!(client.health().await);

    let raw = reqwest::get(format!("{base}/v1/models")).await.unwrap().text().await.unwrap();
    assert!(!raw.contains("10.0.0.9"), "descriptors must not leak backend urls");
    let models = client.models().await.unwrap();
    assert_eq!(models.iter().map(|m| m.name.as_str()).collect::<Vec<_>>(), ["Yi", "Stub"]);

    client.chat(ask("Yi", "one two")).await.unwrap();
    let resp = reqwest::get(format!("{base}/metrics")).await.unwrap();
    assert_eq!(
        resp.headers()["content-type"].to_str().unwrap(),
        "text/plain; version=0.0.4; charset=utf-8"
    );
    let text = resp.text().await.unwrap();
    let scrape = prometheus_parse::Scrape::parse(text.lines().map(|l| Ok(l.to_string()))).unwrap();
    let find = |name: &str| {
        scrape
            .samples
            .iter()
            .find(|s| s.metric == name && s.labels.get("model") == Some("Yi"))
            .unwrap_or_else(|| panic!("{name} missing in\n{text}"))
    };
    assert!(matches!(find("edgellm_requests_total").value, prometheus_parse::Value::Counter(v) if v == 1.0));
    match find("edgellm_prefill_tokens_per_second").value {
        prometheus_parse::Value::Gauge(v) => assert!((v - 1000.0 / 13.79).abs() < 1e-9),
        ref other => panic!("{other:?}"),
    }
}

#[tokio::test]
async fn probe_reports_liveness_and_model() {
    let stub = spawn_stub(Stub::default()).await;
    let live = Backend::from_endpoint(&BackendEndpoint::HttpCompletion { url: format!("http://{stub}") });
    let p = live.probe().await;
    assert!(p.alive);
    assert_eq!(p.reported_model.as_deref(), Some("stub-7b-q4_k_m.gguf"));

    let dead = HttpBackend::new(&format!("http://{}", dead_port()));
    let p = dead.probe().await;
    assert!(!p.alive);
    assert_eq!(p.reported_model, None);

    let sim = Backend::from_endpoint(&BackendEndpoint::Simulated(SimConfig::new(1.0, 1.0)));
    assert!(sim.probe().await.alive);
}

#[tokio::test]
async fn scoring_over_http() {
    let stub = spawn_stub(Stub::default()).await;
    let b = HttpBackend::new(&format!("http://{stub}"));
    let req = ScoreRequest { context: "ab".into(), continuation: "cde".into() };
    assert_eq!(b.score(&req).await.unwrap(), -1.5);

    let stub = spawn_stub(Stub { scoring: false, ..Stub::default() }).await;
    let b = HttpBackend::new(&format!("http://{stub}"));
    assert!(matches!(b.score(&req).await, Err(BackendError::CapabilityMissing(_))));
}
