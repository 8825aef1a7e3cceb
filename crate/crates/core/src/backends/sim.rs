//! Deterministic simulated backend.
//!
//! Emits `tok0 tok1 ...` and bills a fixed number of milliseconds per prompt
//! token and per generated token, optionally with seeded gaussian jitter. In
//! `Injected` mode the timings are reported without sleeping; in `Wall` mode
//! the stream is paced in real time.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{BackendError, BackendTimings, Completion, FinishReason, ScoreRequest, TokenSink};
use crate::text::{fnv1a64, word_count};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimClock {
    Wall,
    #[default]
    Injected,
}

/// Fixed log-likelihood for one (context, continuation) pair. The context is
/// given either verbatim or as its FNV-1a 64-bit hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context_hash: Option<u64>,
    pub continuation: String,
    pub ll: f64,
}

impl ScoreEntry {
    pub fn new(context: &str, continuation: &str, ll: f64) -> Self {
        ScoreEntry {
            context: None,
            context_hash: Some(fnv1a64(context)),
            continuation: continuation.to_string(),
            ll,
        }
    }

    fn key(&self) -> Option<(u64, String)> {
        let h = match (&self.context, self.context_hash) {
            (_, Some(h)) => h,
            (Some(c), None) => fnv1a64(c),
            (None, None) => return None,
        };
        Some((h, self.continuation.clone()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub prefill_ms_per_token: f64,
    pub decode_ms_per_token: f64,
    #[serde(default)]
    pub jitter_sigma_ms: f64,
    #[serde(default)]
    pub clock: SimClock,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop_after_tokens: Option<u32>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub score_table: Vec<ScoreEntry>,
}

#[derive(Debug, Error, PartialEq)]
pub enum SimConfigError {
    #[error("{0} must be a positive finite number")]
    NonPositiveRate(&'static str),
    #[error("jitter_sigma_ms must be finite and non-negative")]
    BadJitter,
    #[error("stop_after_tokens must be positive")]
    ZeroStop,
    #[error("score_table entry for {0:?} needs context or context_hash")]
    UnkeyedScore(String),
}

impl SimConfig {
    pub fn new(prefill_ms_per_token: f64, decode_ms_per_token: f64) -> Self {
        SimConfig {
            prefill_ms_per_token,
            decode_ms_per_token,
            jitter_sigma_ms: 0.0,
            clock: SimClock::Injected,
            seed: 0,
            stop_after_tokens: None,
            score_table: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<(), SimConfigError> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.prefill_ms_per_token) {
            return Err(SimConfigError::NonPositiveRate("prefill_ms_per_token"));
        }
        if !positive(self.decode_ms_per_token) {
            return Err(SimConfigError::NonPositiveRate("decode_ms_per_token"));
        }
        if !(self.jitter_sigma_ms.is_finite() && self.jitter_sigma_ms >= 0.0) {
            return Err(SimConfigError::BadJitter);
        }
        if self.stop_after_tokens == Some(0) {
            return Err(SimConfigError::ZeroStop);
        }
        if let Some(e) = self.score_table.iter().find(|e| e.key().is_none()) {
            return Err(SimConfigError::UnkeyedScore(e.continuation.clone()));
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct SimBackend {
    config: SimConfig,
    scores: HashMap<(u64, String), f64>,
    ordinal: AtomicU64,
}

impl SimBackend {
    pub fn new(config: SimConfig) -> Self {
        let scores = config.score_table.iter().filter_map(|e| Some((e.key()?, e.ll))).collect();
        SimBackend {
            config,
            scores,
            ordinal: AtomicU64::new(0),
        }
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    /// Prompt size as the simulator bills it: whitespace words, at least one.
    pub fn prompt_tokens(prompt: &str) -> u64 {
        word_count(prompt).max(1) as u64
    }

    pub async fn complete(
        &self,
        prompt: &str,
        max_new_tokens: u32,
        on_token: &mut TokenSink<'_>,
    ) -> Result<Completion, BackendError> {
        if max_new_tokens == 0 {
            return Err(BackendError::InvalidRequest("max_new_tokens must be positive".into()));
        }
        let cfg = &self.config;
        // Each request gets its own generator stream so concurrent calls never
        // share state.
        let ordinal = self.ordinal.fetch_add(1, Ordering::Relaxed);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(ordinal);

        let prompt_tokens = Self::prompt_tokens(prompt);
        let (generated, finish) = match cfg.stop_after_tokens {
            Some(stop) if stop < max_new_tokens => (stop, FinishReason::Stop),
            _ => (max_new_tokens, FinishReason::MaxTokens),
        };

        let jitter = (cfg.jitter_sigma_ms > 0.0)
            .then(|| Normal::new(0.0, cfg.jitter_sigma_ms).expect("validated sigma"));
        let mut draw = |rate: f64| match &jitter {
            Some(n) => (rate + n.sample(&mut rng)).max(0.0),
            None => rate,
        };

        let prompt_ms = if jitter.is_some() {
            (0..prompt_tokens).map(|_| draw(cfg.prefill_ms_per_token)).sum()
        } else {
            prompt_tokens as f64 * cfg.prefill_ms_per_token
        };
        let decode_each: Vec<f64> = (0..generated).map(|_| draw(cfg.decode_ms_per_token)).collect();
        let generation_ms = if jitter.is_some() {
            decode_each.iter().sum()
        } else {
            f64::from(generated) * cfg.decode_ms_per_token
        };

        let wall = cfg.clock == SimClock::Wall;
        if wall {
            tokio::time::sleep(ms(prompt_ms)).await;
        }
        let mut text = String::new();
        for (i, d) in decode_each.iter().enumerate() {
            if wall {
                tokio::time::sleep(ms(*d)).await;
            }
            let piece = if i == 0 {
                "tok0".to_string()
            } else {
                format!(" tok{i}")
            };
            text.push_str(&piece);
            if on_token(&piece).is_break() {
                return Err(BackendError::Cancelled);
            }
        }

        Ok(Completion {
            text,
            token_count: u64::from(generated),
            timings: Some(BackendTimings {
                prompt_tokens,
                prompt_ms,
                generated_tokens: u64::from(generated),
                generation_ms,
            }),
            finish,
            protocol_error: None,
        })
    }

    /// Table lookup, falling back to -1 per whitespace token of the
    /// continuation.
    pub fn score(&self, req: &ScoreRequest) -> Result<f64, BackendError> {
        if req.continuation.is_empty() {
            return Err(BackendError::InvalidRequest("continuation is empty".into()));
        }
        let key = (fnv1a64(&req.context), req.continuation.clone());
        Ok(self
            .scores
            .get(&key)
            .copied()
            .unwrap_or(-(word_count(&req.continuation) as f64)))
    }
}

fn ms(v: f64) -> Duration {
    Duration::from_secs_f64(v.max(0.0) / 1000.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::ops::ControlFlow;
    use std::time::Instant;

    async fn run(b: &SimBackend, prompt: &str, n: u32) -> (Vec<String>, Completion) {
        let mut toks = Vec::new();
        let c = b
            .complete(prompt, n, &mut |t: &str| {
                toks.push(t.to_string());
                ControlFlow::Continue(())
            })
            .await
            .unwrap();
        (toks, c)
    }

    fn prompt(words: usize) -> String {
        vec!["w"; words].join(" ")
    }

    #[tokio::test]
    async fn injected_timings_are_products() {
        let mut cfg = SimConfig::new(276.42, 40.0);
        cfg.seed = 1;
        let b = SimBackend::new(cfg);
        let (toks, c) = run(&b, &prompt(10), 3).await;
        assert_eq!(toks, ["tok0", " tok1", " tok2"]);
        assert_eq!(c.text, "tok0 tok1 tok2");
        let t = c.timings.unwrap();
        assert_eq!(t.prompt_tokens, 10);
        assert_eq!(t.prompt_ms, 10.0 * 276.42);
        assert!((t.prompt_ms - 2764.2).abs() < 1e-9);
        assert_eq!((t.generated_tokens, t.generation_ms), (3, 120.0));
        assert_eq!(c.finish, FinishReason::MaxTokens);
    }

    #[tokio::test]
    async fn early_stop_dominates_budget() {
        let mut cfg = SimConfig::new(1.0, 1.0);
        cfg.stop_after_tokens = Some(2);
        let b = SimBackend::new(cfg);
        let (toks, c) = run(&b, "hi", 500).await;
        assert_eq!(toks.len(), 2);
        assert_eq!(c.finish, FinishReason::Stop);
    }

    #[tokio::test]
    async fn seeded_jitter_is_reproducible_and_nonneg() {
        let mut cfg = SimConfig::new(0.5, 0.5);
        cfg.jitter_sigma_ms = 5.0;
        cfg.seed = 42;
        let a = SimBackend::new(cfg.clone());
        let b = SimBackend::new(cfg);
        for _ in 0..3 {
            let (_, ca) = run(&a, &prompt(20), 20).await;
            let (_, cb) = run(&b, &prompt(20), 20).await;
            assert_eq!(ca, cb);
            let t = ca.timings.unwrap();
            assert!(t.prompt_ms >= 0.0 && t.generation_ms >= 0.0);
        }
        // successive requests draw from different streams
        let (_, c1) = run(&a, &prompt(20), 20).await;
        let (_, c2) = run(&a, &prompt(20), 20).await;
        assert_ne!(c1.timings, c2.timings);
    }

    #[tokio::test]
    async fn sink_break_cancels() {
        let b = SimBackend::new(SimConfig::new(1.0, 1.0));
        let mut n = 0;
        let r = b
            .complete("x", 10, &mut |_: &str| {
                n += 1;
                if n == 3 {
                    ControlFlow::Break(())
                } else {
                    ControlFlow::Continue(())
                }
            })
            .await;
        assert_eq!(r, Err(BackendError::Cancelled));
    }

    #[tokio::test]
    async fn wall_clock_paces_tokens() {
        let mut cfg = SimConfig::new(10.0, 20.0);
        cfg.clock = SimClock::Wall;
        let b = SimBackend::new(cfg);
        let start = Instant::now();
        let (_, c) = run(&b, &prompt(5), 5).await;
        let elapsed = start.elapsed().as_secs_f64() * 1000.0;
        let expected = 5.0 * 10.0 + 5.0 * 20.0;
        assert!(elapsed >= expected * 0.8, "{elapsed} < 0.8 * {expected}");
        assert_eq!(c.timings.unwrap().prompt_ms, 50.0);
    }

    #[tokio::test]
    async fn wall_clock_cancel_mid_stream() {
        let mut cfg = SimConfig::new(1.0, 5.0);
        cfg.clock = SimClock::Wall;
        let b = SimBackend::new(cfg);
        let r = b
            .complete("x", 50, &mut |t: &str| {
                if t == " tok1" {
                    ControlFlow::Break(())
                } else {
                    ControlFlow::Continue(())
                }
            })
            .await;
        assert_eq!(r, Err(BackendError::Cancelled));
    }

    #[test]
    fn default_and_table_scores() {
        let mut cfg = SimConfig::new(1.0, 1.0);
        cfg.score_table = vec![
            ScoreEntry::new("h", "opt1", -5.2),
            ScoreEntry {
                context: Some("h".into()),
                context_hash: None,
                continuation: "opt2".into(),
                ll: -7.1,
            },
        ];
        let b = SimBackend::new(cfg);
        let req = |c: &str, k: &str| ScoreRequest {
            context: c.into(),
            continuation: k.into(),
        };
        assert_eq!(b.score(&req("h", "opt1")).unwrap(), -5.2);
        assert_eq!(b.score(&req("h", "opt2")).unwrap(), -7.1);
        assert_eq!(b.score(&req("other", "a b c")).unwrap(), -3.0);
        assert!(b.score(&req("", "a b")).unwrap() > b.score(&req("", "a b c")).unwrap());
        assert!(matches!(b.score(&req("x", "")), Err(BackendError::InvalidRequest(_))));
    }

    #[test]
    fn config_validation() {
        assert!(SimConfig::new(1.0, 1.0).validate().is_ok());
        assert!(SimConfig::new(0.0, 1.0).validate().is_err());
        assert!(SimConfig::new(1.0, f64::NAN).validate().is_err());
        let mut c = SimConfig::new(1.0, 1.0);
        c.jitter_sigma_ms = -1.0;
        assert_eq!(c.validate(), Err(SimConfigError::BadJitter));
        let mut c = SimConfig::new(1.0, 1.0);
        c.stop_after_tokens = Some(0);
        assert_eq!(c.validate(), Err(SimConfigError::ZeroStop));
    }

    proptest! {
        #[test]
        fn zero_jitter_per_token_rates_are_exact(words in 1usize..2000, gen in 1u32..600, p in 0.01f64..500.0, d in 0.01f64..500.0) {
            let b = SimBackend::new(SimConfig::new(p, d));
            let rt = tokio::runtime::Builder::new_current_thread().build().unwrap();
            let c = rt.block_on(b.complete(&prompt(words), gen, &mut |_: &str| ControlFlow::Continue(()))).unwrap();
            let t = c.timings.unwrap();
            prop_assert_eq!(t.prompt_ms, t.prompt_tokens as f64 * p);
            prop_assert_eq!(t.generation_ms, t.generated_tokens as f64 * d);
            // n * r / n can land one ulp away from r.
            prop_assert!((t.prompt_ms / t.prompt_tokens as f64 - p).abs() <= 2.0 * f64::EPSILON * p);
            prop_assert!((t.generation_ms / t.generated_tokens as f64 - d).abs() <= 2.0 * f64::EPSILON * d);
        }

        #[test]
        fn default_score_is_additive(a in "[a-z]{1,5}( [a-z]{1,5}){0,6}", bb in "[a-z]{1,5}( [a-z]{1,5}){0,6}") {
            let s = SimBackend::new(SimConfig::new(1.0, 1.0));
            let ll = |k: &str| s.score(&ScoreRequest { context: "ctx".into(), continuation: k.into() }).unwrap();
            prop_assert_eq!(ll(&format!("{a} {bb}")), ll(&a) + ll(&bb));
        }
    }
}
