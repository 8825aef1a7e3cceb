use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{BenchError, DatasetStats, RunConfig, RunRecord};
use crate::exec::Execution;
use crate::metrics::{aggregate, cv_by_turn_with, phase_share, AggregateStats, CvReport, PhaseShare, PhaseTiming};
use crate::monitor::ResourceSummary;
use crate::TOOL_VERSION;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub tool_version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<RunConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset_stats: Option<DatasetStats>,
    pub models: Vec<ModelReport>,
}

impl Report {
    pub fn model(&self, name: &str) -> Option<&ModelReport> {
        self.models.iter().find(|m| m.model == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub model: String,
    /// Records seen for this model, failed ones included.
    pub records: u64,
    /// Records that ended in a backend error; excluded from every aggregate.
    pub failures: u64,
    /// Set when no successful record exists.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub absent_reason: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<ModelSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resources: Option<ResourceSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
}

/// Aggregates over successful records. A phase with no measurable record
/// (for example, no generated tokens anywhere) is `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub prefill_tps: Option<AggregateStats>,
    pub decode_tps: Option<AggregateStats>,
    pub prefill_ms_per_token: Option<AggregateStats>,
    pub decode_ms_per_token: Option<AggregateStats>,
    pub total_time_s: AggregateStats,
    pub phase_shares: PhaseShares,
    pub cv: CvReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseShares {
    /// Prefill fraction of wall time per request.
    pub per_request_prefill: AggregateStats,
    /// Shares of one prompt token plus one generated token, from the mean
    /// per-token times.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_token: Option<PhaseShare>,
    /// Mean prefill plus mean decode milliseconds per token.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_token_total_ms: Option<f64>,
}

/// Builds the report with the default execution mode.
pub fn build_report(
    records: &[RunRecord],
    resources: &BTreeMap<String, ResourceSummary>,
    accuracy: &BTreeMap<String, f64>,
    dataset_stats: Option<DatasetStats>,
    config: Option<&RunConfig>,
) -> Result<Report, BenchError> {
    build_report_with(records, resources, accuracy, dataset_stats, config, Execution::default())
}

/// Per-model aggregation. Models follow the configured order, then any
/// others in order of first appearance. Each model is summarized
/// independently, so `exec` may spread them across threads.
pub fn build_report_with(
    records: &[RunRecord],
    resources: &BTreeMap<String, ResourceSummary>,
    accuracy: &BTreeMap<String, f64>,
    dataset_stats: Option<DatasetStats>,
    config: Option<&RunConfig>,
    exec: Execution,
) -> Result<Report, BenchError> {
    let mut order: Vec<String> = config.map(|c| c.models.clone()).unwrap_or_default();
    for r in records {
        if !order.contains(&r.model) {
            order.push(r.model.clone());
        }
    }
    if order.is_empty() {
        return Err(crate::metrics::MetricsError::EmptySample.into());
    }
    let mut grouped: BTreeMap<&str, Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        grouped.entry(&r.model).or_default().push(r);
    }
    let groups: Vec<(&str, Vec<&RunRecord>)> = order
        .iter()
        .map(|m| (m.as_str(), grouped.remove(m.as_str()).unwrap_or_default()))
        .collect();

    let models = exec
        .map(&groups, |(model, recs)| {
            model_report(model, recs, exec).map(|mut m| {
                m.resources = resources.get(*model).copied();
                m.accuracy = accuracy.get(*model).copied();
                m
            })
        })
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;

    Ok(Report {
        tool_version: TOOL_VERSION.to_string(),
        config: config.cloned(),
        dataset_stats,
        models,
    })
}

fn model_report(model: &str, recs: &[&RunRecord], exec: Execution) -> Result<ModelReport, BenchError> {
    let ok: Vec<RunRecord> = recs.iter().filter(|r| r.succeeded()).map(|r| (*r).clone()).collect();
    let failures = (recs.len() - ok.len()) as u64;
    let mut report = ModelReport {
        model: model.to_string(),
        records: recs.len() as u64,
        failures,
        absent_reason: None,
        summary: None,
        resources: None,
        accuracy: None,
    };
    if ok.is_empty() {
        report.absent_reason = Some(if recs.is_empty() {
            "no records".to_string()
        } else {
            format!("all {failures} records failed")
        });
        return Ok(report);
    }

    let stats = |vals: Vec<f64>| -> Result<Option<AggregateStats>, BenchError> {
        if vals.is_empty() {
            Ok(None)
        } else {
            Ok(Some(aggregate(&vals)?))
        }
    };
    let prefill_tps = stats(ok.iter().filter_map(|r| r.throughput.prefill_tps).collect())?;
    let decode_tps = stats(ok.iter().filter_map(|r| r.throughput.decode_tps).collect())?;
    let prefill_ms_per_token = stats(ok.iter().filter_map(|r| r.timing.prefill_ms_per_token()).collect())?;
    let decode_ms_per_token = stats(ok.iter().filter_map(|r| r.timing.decode_ms_per_token()).collect())?;
    let total_time_s = aggregate(&ok.iter().map(|r| r.timing.total_ms / 1000.0).collect::<Vec<_>>())?;
    let per_request_prefill = aggregate(
        &ok.iter()
            .map(|r| phase_share(&r.timing).map(|s| s.prefill_fraction).unwrap_or(0.0))
            .collect::<Vec<_>>(),
    )?;
    let (per_token, per_token_total_ms) = match (&prefill_ms_per_token, &decode_ms_per_token) {
        (Some(p), Some(d)) => {
            let unit = PhaseTiming::new(1, p.mean, 1, d.mean);
            (phase_share(&unit).ok(), Some(unit.total_ms))
        }
        _ => (None, None),
    };

    report.summary = Some(ModelSummary {
        prefill_tps,
        decode_tps,
        prefill_ms_per_token,
        decode_ms_per_token,
        total_time_s,
        phase_shares: PhaseShares {
            per_request_prefill,
            per_token,
            per_token_total_ms,
        },
        cv: cv_by_turn_with(&ok, exec)?,
    });
    Ok(report)
}
