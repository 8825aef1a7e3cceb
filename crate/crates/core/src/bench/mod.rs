//! Benchmark driver: conversation datasets, sequential replay through the
//! gateway, per-model reports and their JSON/CSV artifacts.

mod dataset;
mod emit;
mod replay;
mod report;

use std::path::PathBuf;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::FinishReason;
use crate::metrics::{MetricsError, PhaseTiming, ThroughputSample};

pub use dataset::{dataset_stats, load_dataset, parse_dataset, Conversation, DatasetStats};
pub use emit::{
    emit, read_records, read_records_csv, read_records_jsonl, write_records_csv,
    write_records_jsonl, write_summary_csv, OutputFormat, RECORD_COLUMNS,
};
pub use replay::{replay, ChatClient, ModelRunFailed, ReplayOutcome};
pub use report::{build_report, build_report_with, ModelReport, ModelSummary, PhaseShares, Report};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("dataset line {line}: {reason}")]
    DatasetSyntax { line: usize, reason: String },
    #[error("duplicate conversation id {0:?}")]
    DuplicateConversation(String),
    #[error("conversation {id:?} turn {turn} is empty")]
    EmptyPrompt { id: String, turn: usize },
    #[error("conversation {0:?} has no turns")]
    NoTurns(String),
    #[error("invalid run configuration: {0}")]
    InvalidConfig(String),
    #[error("records line {line}: {reason}")]
    RecordSyntax { line: usize, reason: String },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

fn default_repetitions() -> u32 {
    3
}

fn default_max_new_tokens() -> u32 {
    crate::gateway::DEFAULT_MAX_NEW_TOKENS
}

fn default_warmup() -> u32 {
    1
}

fn default_interval() -> u64 {
    crate::monitor::DEFAULT_INTERVAL_MS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub models: Vec<String>,
    pub dataset_path: PathBuf,
    #[serde(default = "default_repetitions")]
    pub repetitions: u32,
    #[serde(default = "default_max_new_tokens")]
    pub max_new_tokens: u32,
    #[serde(default = "default_warmup")]
    pub warmup_requests: u32,
    /// When set, replaces the seed of every simulated backend.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub monitor_resources: bool,
    /// Process to sample; defaults to this process.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub monitor_pid: Option<u32>,
    #[serde(default = "default_interval")]
    pub monitor_interval_ms: u64,
}

impl RunConfig {
    pub fn new(models: Vec<String>, dataset_path: impl Into<PathBuf>) -> Self {
        RunConfig {
            models,
            dataset_path: dataset_path.into(),
            repetitions: default_repetitions(),
            max_new_tokens: default_max_new_tokens(),
            warmup_requests: default_warmup(),
            seed: None,
            monitor_resources: false,
            monitor_pid: None,
            monitor_interval_ms: default_interval(),
        }
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        if self.models.is_empty() {
            return Err(BenchError::InvalidConfig("no models selected".into()));
        }
        if self.repetitions == 0 {
            return Err(BenchError::InvalidConfig("repetitions must be at least 1".into()));
        }
        if self.max_new_tokens == 0 {
            return Err(BenchError::InvalidConfig("max_new_tokens must be at least 1".into()));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = self.models.iter().find(|m| !seen.insert(*m)) {
            return Err(BenchError::InvalidConfig(format!("model {dup:?} listed twice")));
        }
        Ok(())
    }
}

/// One measured (model, conversation, turn, repetition) request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub model: String,
    pub conversation_id: String,
    /// 1-based.
    pub turn_index: u32,
    /// 1-based.
    pub repetition: u32,
    pub timing: PhaseTiming,
    pub throughput: ThroughputSample,
    pub started_at: DateTime<Utc>,
    pub finish_reason: FinishReason,
}

impl RunRecord {
    pub fn new(
        model: &str,
        conversation_id: &str,
        turn_index: u32,
        repetition: u32,
        timing: PhaseTiming,
        started_at: DateTime<Utc>,
        finish_reason: FinishReason,
    ) -> Self {
        RunRecord {
            model: model.to_string(),
            conversation_id: conversation_id.to_string(),
            turn_index,
            repetition,
            timing,
            throughput: ThroughputSample::from_timing(&timing),
            started_at,
            finish_reason,
        }
    }

    pub fn succeeded(&self) -> bool {
        self.finish_reason != FinishReason::BackendError
    }

    /// True when the stored throughput is what the timing implies.
    pub fn is_consistent(&self) -> bool {
        let expect = ThroughputSample::from_timing(&self.timing);
        let close = |a: Option<f64>, b: Option<f64>| match (a, b) {
            (None, None) => true,
            (Some(x), Some(y)) => (x - y).abs() <= 1e-9 * x.abs().max(y.abs()),
            _ => false,
        };
        close(self.throughput.prefill_tps, expect.prefill_tps)
            && close(self.throughput.decode_tps, expect.decode_tps)
    }
}

#[cfg(test)]
pub(crate) fn test_record(
    model: &str,
    conversation_id: &str,
    turn_index: u32,
    repetition: u32,
    timing: PhaseTiming,
) -> RunRecord {
    RunRecord::new(
        model,
        conversation_id,
        turn_index,
        repetition,
        timing,
        DateTime::<Utc>::from_timestamp(1_700_000_000, 0).unwrap(),
        FinishReason::MaxTokens,
    )
}
