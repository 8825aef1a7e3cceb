//! Report and record files.
//!
//! `records.csv` columns, in order:
//!
//! | column | meaning |
//! |---|---|
//! | model, conversation_id, turn_index, repetition | record key |
//! | prompt_tokens, prefill_ms, generated_tokens, decode_ms, total_ms | phase timing |
//! | prefill_tps, decode_tps | throughput, empty when the phase had no tokens |
//! | finish_reason | `stop`, `max_tokens` or `backend_error` |
//! | started_at | RFC 3339 wall time; last so it can be cut off for diffs |
//!
//! Numbers are plain decimals (`.` separator, no grouping, no exponent).
//! Every file is UTF-8 with LF line endings.

use std::fs::File;
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};

use super::{BenchError, Report, RunRecord};
use crate::backends::FinishReason;
use crate::metrics::{PhaseTiming, ThroughputSample};

pub const RECORD_COLUMNS: [&str; 13] = [
    "model",
    "conversation_id",
    "turn_index",
    "repetition",
    "prompt_tokens",
    "prefill_ms",
    "generated_tokens",
    "decode_ms",
    "total_ms",
    "prefill_tps",
    "decode_tps",
    "finish_reason",
    "started_at",
];

const SUMMARY_COLUMNS: [&str; 18] = [
    "model",
    "records",
    "failures",
    "absent_reason",
    "prefill_tps_mean",
    "prefill_tps_std",
    "decode_tps_mean",
    "decode_tps_std",
    "prefill_ms_per_token_mean",
    "decode_ms_per_token_mean",
    "total_time_s_mean",
    "total_time_s_std",
    "prefill_share_per_token",
    "per_token_total_ms",
    "cpu_total_fraction_mean",
    "rss_bytes_mean",
    "peak_rss_bytes",
    "accuracy",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputFormat {
    /// `report.json` and `records.jsonl`.
    Json,
    /// `records.csv` and `summary.csv`.
    Csv,
}

/// Writes the requested formats into `dir`, creating it if needed, and
/// returns the paths written.
pub fn emit(
    report: &Report,
    records: &[RunRecord],
    dir: impl AsRef<Path>,
    formats: &[OutputFormat],
) -> Result<Vec<PathBuf>, BenchError> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for f in formats {
        match f {
            OutputFormat::Json => {
                let p = dir.join("report.json");
                let mut doc = serde_json::to_string_pretty(report).expect("report serializes");
                doc.push('\n');
                std::fs::write(&p, doc)?;
                written.push(p);
                let p = dir.join("records.jsonl");
                write_records_jsonl(records, BufWriter::new(File::create(&p)?))?;
                written.push(p);
            }
            OutputFormat::Csv => {
                let p = dir.join("records.csv");
                write_records_csv(records, BufWriter::new(File::create(&p)?))?;
                written.push(p);
                let p = dir.join("summary.csv");
                write_summary_csv(report, BufWriter::new(File::create(&p)?))?;
                written.push(p);
            }
        }
    }
    Ok(written)
}

fn csv_writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(w)
}

fn csv_err(e: csv::Error) -> BenchError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => BenchError::Io(io),
        other => BenchError::Io(std::io::Error::other(format!("{other:?}"))),
    }
}

fn num(v: f64) -> String {
    format!("{v}")
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

fn finish_label(f: FinishReason) -> &'static str {
    match f {
        FinishReason::Stop => "stop",
        FinishReason::MaxTokens => "max_tokens",
        FinishReason::BackendError => "backend_error",
    }
}

pub fn write_records_csv<W: Write>(records: &[RunRecord], w: W) -> Result<(), BenchError> {
    let mut out = csv_writer(w);
    out.write_record(RECORD_COLUMNS).map_err(csv_err)?;
    for r in records {
        let t = &r.timing;
        out.write_record([
            r.model.clone(),
            r.conversation_id.clone(),
            r.turn_index.to_string(),
            r.repetition.to_string(),
            t.prompt_tokens.to_string(),
            num(t.prefill_ms),
            t.generated_tokens.to_string(),
            num(t.decode_ms),
            num(t.total_ms),
            opt(r.throughput.prefill_tps),
            opt(r.throughput.decode_tps),
            finish_label(r.finish_reason).to_string(),
            r.started_at.to_rfc3339_opts(chrono::SecondsFormat::Nanos, true),
        ])
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_summary_csv<W: Write>(report: &Report, w: W) -> Result<(), BenchError> {
    let mut out = csv_writer(w);
    out.write_record(SUMMARY_COLUMNS).map_err(csv_err)?;
    for m in &report.models {
        let s = m.summary.as_ref();
        let mean = |f: fn(&super::ModelSummary) -> Option<crate::metrics::AggregateStats>| {
            opt(s.and_then(f).map(|a| a.mean))
        };
        let std = |f: fn(&super::ModelSummary) -> Option<crate::metrics::AggregateStats>| {
            opt(s.and_then(f).map(|a| a.std))
        };
        out.write_record([
            m.model.clone(),
            m.records.to_string(),
            m.failures.to_string(),
            m.absent_reason.clone().unwrap_or_default(),
            mean(|s| s.prefill_tps),
            std(|s| s.prefill_tps),
            mean(|s| s.decode_tps),
            std(|s| s.decode_tps),
            mean(|s| s.prefill_ms_per_token),
            mean(|s| s.decode_ms_per_token),
            mean(|s| Some(s.total_time_s)),
            std(|s| Some(s.total_time_s)),
            opt(s.and_then(|s| s.phase_shares.per_token).map(|p| p.prefill_fraction)),
            opt(s.and_then(|s| s.phase_shares.per_token_total_ms)),
            opt(m.resources.map(|r| r.cpu.mean)),
            opt(m.resources.map(|r| r.rss.mean)),
            m.resources.map(|r| r.peak_rss_bytes.to_string()).unwrap_or_default(),
            opt(m.accuracy),
        ])
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_records_jsonl<W: Write>(records: &[RunRecord], mut w: W) -> Result<(), BenchError> {
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn checked(r: RunRecord, line: usize) -> Result<RunRecord, BenchError> {
    if r.is_consistent() {
        Ok(r)
    } else {
        Err(BenchError::RecordSyntax {
            line,
            reason: "throughput does not match timing".into(),
        })
    }
}

pub fn read_records_jsonl(reader: impl BufRead) -> Result<Vec<RunRecord>, BenchError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: RunRecord = serde_json::from_str(&line).map_err(|e| BenchError::RecordSyntax {
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.push(checked(r, i + 1)?);
    }
    Ok(out)
}

pub fn read_records_csv(reader: impl std::io::Read) -> Result<Vec<RunRecord>, BenchError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let header: Vec<String> = rdr.headers().map_err(csv_err)?.iter().map(String::from).collect();
    if header != RECORD_COLUMNS {
        return Err(BenchError::RecordSyntax {
            line: 1,
            reason: format!("unexpected header {header:?}"),
        });
    }
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(csv_err)?;
        let bad = |what: &str| BenchError::RecordSyntax {
            line,
            reason: format!("bad {what}"),
        };
        let int = |k: usize| row[k].parse::<u64>().map_err(|_| bad(RECORD_COLUMNS[k]));
        let float = |k: usize| row[k].parse::<f64>().map_err(|_| bad(RECORD_COLUMNS[k]));
        let maybe = |k: usize| {
            if row[k].is_empty() {
                Ok(None)
            } else {
                float(k).map(Some)
            }
        };
        let finish = match &row[11] {
            "stop" => FinishReason::Stop,
            "max_tokens" => FinishReason::MaxTokens,
            "backend_error" => FinishReason::BackendError,
            _ => return Err(bad("finish_reason")),
        };
        let started_at = DateTime::parse_from_rfc3339(&row[12])
            .map_err(|_| bad("started_at"))?
            .with_timezone(&Utc);
        let r = RunRecord {
            model: row[0].to_string(),
            conversation_id: row[1].to_string(),
            turn_index: int(2)? as u32,
            repetition: int(3)? as u32,
            timing: PhaseTiming {
                prompt_tokens: int(4)?,
                prefill_ms: float(5)?,
                generated_tokens: int(6)?,
                decode_ms: float(7)?,
                total_ms: float(8)?,
            },
            throughput: ThroughputSample {
                prefill_tps: maybe(9)?,
                decode_tps: maybe(10)?,
            },
            started_at,
            finish_reason: finish,
        };
        out.push(checked(r, line)?);
    }
    Ok(out)
}

/// Reads `records.csv` or `records.jsonl`, chosen by extension.
pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<RunRecord>, BenchError> {
    let path = path.as_ref();
    let f = File::open(path)?;
    if path.extension().is_some_and(|e| e == "csv") {
        read_records_csv(std::io::BufReader::new(f))
    } else {
        read_records_jsonl(std::io::BufReader::new(f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::{build_report, test_record};
    use std::collections::BTreeMap;

    fn sample_records() -> Vec<RunRecord> {
        let mut v: Vec<_> = (1..=3)
            .map(|t| test_record("Yi", "c1", t, 1, PhaseTiming::new(10 * t as u64, 137.9 * t as f64, 5, 12.5)))
            .collect();
        v.push(test_record("Phi", "c,2", 1, 2, PhaseTiming::new(3, 124.5, 0, 0.0)));
        v
    }

    fn report(recs: &[RunRecord]) -> Report {
        build_report(recs, &BTreeMap::new(), &BTreeMap::from([("Yi".to_string(), 0.5)]), None, None).unwrap()
    }

    #[test]
    fn json_round_trip() {
        let recs = sample_records();
        let rep = report(&recs);
        let dir = tempfile::tempdir().unwrap();
        emit(&rep, &recs, dir.path(), &[OutputFormat::Json]).unwrap();
        let back: Report =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
        assert_eq!(back, rep);
        assert_eq!(read_records(dir.path().join("records.jsonl")).unwrap(), recs);
    }

    #[test]
    fn csv_shape_and_round_trip() {
        let recs = sample_records();
        let dir = tempfile::tempdir().unwrap();
        emit(&report(&recs), &recs, dir.path(), &[OutputFormat::Csv]).unwrap();
        let text = std::fs::read_to_string(dir.path().join("records.csv")).unwrap();
        assert!(!text.contains('\r'));
        assert_eq!(text.lines().count(), recs.len() + 1);
        assert_eq!(text.lines().next().unwrap(), RECORD_COLUMNS.join(","));
        assert_eq!(read_records(dir.path().join("records.csv")).unwrap(), recs);

        let summary = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
        assert_eq!(summary.lines().count(), 3);
    }

    #[test]
    fn numeric_cells_are_plain_decimals() {
        let recs = vec![test_record("m", "c", 1, 1, PhaseTiming::new(1, 1e-7, 1, 1e15))];
        let mut buf = Vec::new();
        write_records_csv(&recs, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
        for cell in &row[4..11] {
            assert!(cell.chars().all(|c| c.is_ascii_digit() || c == '.'), "{cell}");
            cell.parse::<f64>().unwrap();
        }
    }

    #[test]
    fn inconsistent_record_rejected() {
        let mut r = test_record("m", "c", 1, 1, PhaseTiming::new(1, 1.0, 1, 1.0));
        r.throughput.prefill_tps = Some(3.0);
        let line = serde_json::to_string(&r).unwrap();
        assert!(matches!(
            read_records_jsonl(line.as_bytes()),
            Err(BenchError::RecordSyntax { line: 1, .. })
        ));
    }

    #[test]
    fn unwritable_dir_is_io_error() {
        let f = tempfile::NamedTempFile::new().unwrap();
        let recs = sample_records();
        let err = emit(&report(&recs), &recs, f.path().join("sub"), &[OutputFormat::Csv]).unwrap_err();
        assert!(matches!(err, BenchError::Io(_)));
    }
}
