//! Prometheus text exposition format, version 0.0.4.
//!
//! Output is deterministic: families sorted by name, samples by their sorted
//! label set, values in shortest round-trip decimal.

use std::collections::BTreeMap;
use std::fmt::Write;

use thiserror::Error;

pub const CONTENT_TYPE: &str = "text/plain; version=0.0.4; charset=utf-8";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExpositionError {
    #[error("invalid metric name {0:?}")]
    InvalidMetricName(String),
    #[error("invalid label name {0:?}")]
    InvalidLabelName(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricKind {
    Gauge,
    Counter,
}

impl MetricKind {
    fn as_str(self) -> &'static str {
        match self {
            MetricKind::Gauge => "gauge",
            MetricKind::Counter => "counter",
        }
    }
}

pub type LabelSet = Vec<(String, String)>;

#[derive(Debug, Clone, PartialEq)]
struct Family {
    kind: MetricKind,
    samples: BTreeMap<LabelSet, f64>,
}

/// A labeled set of metric values at one instant.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Snapshot {
    families: BTreeMap<String, Family>,
}

impl Snapshot {
    pub fn set(&mut self, kind: MetricKind, name: &str, labels: &[(&str, &str)], value: f64) {
        let mut ls: LabelSet = labels
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        ls.sort();
        self.families
            .entry(name.to_string())
            .or_insert_with(|| Family {
                kind,
                samples: BTreeMap::new(),
            })
            .samples
            .insert(ls, value);
    }

    pub fn gauge(&mut self, name: &str, labels: &[(&str, &str)], value: f64) {
        self.set(MetricKind::Gauge, name, labels, value);
    }

    pub fn is_empty(&self) -> bool {
        self.families.is_empty()
    }

    /// Flat view: (name, sorted labels, value).
    pub fn samples(&self) -> Vec<(String, LabelSet, f64)> {
        self.families
            .iter()
            .flat_map(|(name, f)| {
                f.samples
                    .iter()
                    .map(move |(ls, v)| (name.clone(), ls.clone(), *v))
            })
            .collect()
    }

    pub fn render(&self) -> Result<String, ExpositionError> {
        render_prometheus(self)
    }
}

pub fn render_prometheus(snapshot: &Snapshot) -> Result<String, ExpositionError> {
    let mut out = String::new();
    for (name, family) in &snapshot.families {
        if !valid_metric_name(name) {
            return Err(ExpositionError::InvalidMetricName(name.clone()));
        }
        let _ = writeln!(out, "# TYPE {name} {}", family.kind.as_str());
        for (labels, value) in &family.samples {
            out.push_str(name);
            if !labels.is_empty() {
                out.push('{');
                for (i, (k, v)) in labels.iter().enumerate() {
                    if !valid_label_name(k) {
                        return Err(ExpositionError::InvalidLabelName(k.clone()));
                    }
                    if i > 0 {
                        out.push(',');
                    }
                    let _ = write!(out, "{k}=\"{}\"", escape_label_value(v));
                }
                out.push('}');
            }
            out.push(' ');
            out.push_str(&format_value(*value));
            out.push('\n');
        }
    }
    Ok(out)
}

fn valid_metric_name(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_' || c == ':')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == ':')
}

fn valid_label_name(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

fn escape_label_value(v: &str) -> String {
    let mut s = String::with_capacity(v.len());
    for c in v.chars() {
        match c {
            '\\' => s.push_str("\\\\"),
            '"' => s.push_str("\\\""),
            '\n' => s.push_str("\\n"),
            c => s.push(c),
        }
    }
    s
}

fn format_value(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else if v == f64::INFINITY {
        "+Inf".into()
    } else if v == f64::NEG_INFINITY {
        "-Inf".into()
    } else {
        // Display is the shortest representation that round-trips.
        format!("{v}")
    }
}
