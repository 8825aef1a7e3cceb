//! Process resource sampling.
//!
//! CPU is recorded in two conventions: `cpu_core_fraction` is process CPU
//! time over wall time (1.0 = one saturated core) and `cpu_total_fraction`
//! divides that by the logical core count. Memory is resident set size.
//! Readings come from `/proc`.

pub mod prometheus;

use std::collections::BTreeMap;
use std::sync::mpsc::{self, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::mono_ns;
use crate::metrics::{aggregate, AggregateStats, MetricsError};

pub const DEFAULT_INTERVAL_MS: u64 = 500;
pub const MIN_INTERVAL_MS: u64 = 50;

#[derive(Debug, Error)]
pub enum MonitorError {
    #[error("process {0} is gone")]
    TargetGone(u32),
    #[error("reading process {pid} statistics: {reason}")]
    Unreadable { pid: u32, reason: String },
    #[error("sampling interval {0} ms is below the {MIN_INTERVAL_MS} ms minimum")]
    IntervalTooShort(u64),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResourceSample {
    /// Monotonic nanoseconds, see [`mono_ns`].
    pub at_ns: u64,
    pub cpu_total_fraction: f64,
    pub cpu_core_fraction: f64,
    pub rss_bytes: u64,
}

/// Result of one sampling call. The first call against a process has no
/// prior CPU reading to diff against and reports memory only.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Reading {
    Baseline { at_ns: u64, rss_bytes: u64 },
    Sample(ResourceSample),
}

#[derive(Debug, Clone, Copy)]
struct RawStat {
    cpu_seconds: f64,
    rss_bytes: u64,
}

fn clock_ticks_per_second() -> f64 {
    // SAFETY: sysconf has no preconditions.
    let v = unsafe { libc::sysconf(libc::_SC_CLK_TCK) };
    if v > 0 {
        v as f64
    } else {
        100.0
    }
}

fn page_size() -> u64 {
    // SAFETY: sysconf has no preconditions.
    let v = unsafe { libc::sysconf(libc::_SC_PAGESIZE) };
    if v > 0 {
        v as u64
    } else {
        4096
    }
}

fn read_stat(pid: u32) -> Result<RawStat, MonitorError> {
    let gone = |e: std::io::Error| {
        if e.kind() == std::io::ErrorKind::NotFound {
            MonitorError::TargetGone(pid)
        } else {
            MonitorError::Unreadable {
                pid,
                reason: e.to_string(),
            }
        }
    };
    let stat = std::fs::read_to_string(format!("/proc/{pid}/stat")).map_err(gone)?;
    let statm = std::fs::read_to_string(format!("/proc/{pid}/statm")).map_err(gone)?;
    let bad = |what: &str| MonitorError::Unreadable {
        pid,
        reason: format!("unexpected {what} layout"),
    };
    // The command name may contain spaces and parentheses; fields resume after
    // the last ')'. Index 0 is then the state, 11 utime, 12 stime.
    let rest = stat.rsplit_once(')').ok_or_else(|| bad("stat"))?.1;
    let fields: Vec<&str> = rest.split_whitespace().collect();
    if fields.len() < 13 {
        return Err(bad("stat"));
    }
    if matches!(fields[0], "Z" | "X" | "x") {
        return Err(MonitorError::TargetGone(pid));
    }
    let utime: u64 = fields[11].parse().map_err(|_| bad("stat"))?;
    let stime: u64 = fields[12].parse().map_err(|_| bad("stat"))?;
    let resident: u64 = statm
        .split_whitespace()
        .nth(1)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| bad("statm"))?;
    Ok(RawStat {
        cpu_seconds: (utime + stime) as f64 / clock_ticks_per_second(),
        rss_bytes: resident * page_size(),
    })
}

/// Samples one process, diffing CPU time against the previous call.
#[derive(Debug)]
pub struct ProcessSampler {
    pid: u32,
    cores: usize,
    prev: Option<(u64, f64)>,
}

impl ProcessSampler {
    pub fn new(pid: u32) -> Self {
        let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
        Self::with_cores(pid, cores)
    }

    pub fn with_cores(pid: u32, cores: usize) -> Self {
        ProcessSampler {
            pid,
            cores: cores.max(1),
            prev: None,
        }
    }

    pub fn pid(&self) -> u32 {
        self.pid
    }

    pub fn sample(&mut self) -> Result<Reading, MonitorError> {
        let raw = read_stat(self.pid)?;
        let now = mono_ns();
        let reading = match self.prev {
            None => Reading::Baseline {
                at_ns: now,
                rss_bytes: raw.rss_bytes,
            },
            Some((t0, cpu0)) => {
                let wall = (now - t0) as f64 / 1e9;
                let core = if wall > 0.0 {
                    ((raw.cpu_seconds - cpu0).max(0.0) / wall).min(self.cores as f64)
                } else {
                    0.0
                };
                Reading::Sample(ResourceSample {
                    at_ns: now,
                    cpu_total_fraction: core / self.cores as f64,
                    cpu_core_fraction: core,
                    rss_bytes: raw.rss_bytes,
                })
            }
        };
        self.prev = Some((now, raw.cpu_seconds));
        Ok(reading)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SamplerEnd {
    Stopped,
    TargetGone,
    Failed(String),
}

pub trait ResourceSink: Send + Sync {
    fn push(&self, sample: ResourceSample);
    fn end(&self, _reason: SamplerEnd) {}
}

/// Collects every sample in arrival order.
#[derive(Debug, Default)]
pub struct VecSink {
    samples: Mutex<Vec<ResourceSample>>,
    end: Mutex<Option<SamplerEnd>>,
}

impl VecSink {
    pub fn samples(&self) -> Vec<ResourceSample> {
        self.samples.lock().unwrap().clone()
    }

    pub fn end_reason(&self) -> Option<SamplerEnd> {
        self.end.lock().unwrap().clone()
    }
}

impl ResourceSink for VecSink {
    fn push(&self, sample: ResourceSample) {
        self.samples.lock().unwrap().push(sample);
    }

    fn end(&self, reason: SamplerEnd) {
        *self.end.lock().unwrap() = Some(reason);
    }
}

/// Latest sample per model, read by the `/metrics` endpoint.
#[derive(Debug, Default)]
pub struct ResourceBoard {
    latest: Mutex<BTreeMap<String, ResourceSample>>,
}

struct BoardSink {
    board: Arc<ResourceBoard>,
    model: String,
}

impl ResourceSink for BoardSink {
    fn push(&self, sample: ResourceSample) {
        self.board
            .latest
            .lock()
            .unwrap()
            .insert(self.model.clone(), sample);
    }
}

impl ResourceBoard {
    pub fn sink_for(self: &Arc<Self>, model: &str) -> Arc<dyn ResourceSink> {
        Arc::new(BoardSink {
            board: Arc::clone(self),
            model: model.to_string(),
        })
    }

    /// Copy of the current readings.
    pub fn latest(&self) -> Vec<(String, ResourceSample)> {
        self.latest
            .lock()
            .unwrap()
            .iter()
            .map(|(k, v)| (k.clone(), *v))
            .collect()
    }
}

/// Background sampler thread. Dropping the handle stops it.
pub struct SamplerHandle {
    stop_tx: Option<mpsc::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl SamplerHandle {
    /// Stops sampling and waits until the sink has seen its end marker.
    /// Further calls do nothing.
    pub fn stop(&mut self) {
        drop(self.stop_tx.take());
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }

    pub fn is_running(&self) -> bool {
        self.thread.as_ref().is_some_and(|t| !t.is_finished())
    }
}

impl Drop for SamplerHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Samples `pid` every `interval_ms` on a dedicated thread, feeding `sink`
/// until stopped or until the process exits. Ticks are scheduled against
/// the start time so cadence does not drift.
pub fn run_sampler(
    pid: u32,
    interval_ms: u64,
    sink: Arc<dyn ResourceSink>,
) -> Result<SamplerHandle, MonitorError> {
    if interval_ms < MIN_INTERVAL_MS {
        return Err(MonitorError::IntervalTooShort(interval_ms));
    }
    let mut sampler = ProcessSampler::new(pid);
    sampler.sample()?;
    let (stop_tx, stop_rx) = mpsc::channel::<()>();
    let interval = Duration::from_millis(interval_ms);
    let thread = std::thread::Builder::new()
        .name(format!("sampler-{pid}"))
        .spawn(move || {
            let start = Instant::now();
            let mut tick = 1u32;
            let end = loop {
                let deadline = start + interval * tick;
                let wait = deadline.saturating_duration_since(Instant::now());
                match stop_rx.recv_timeout(wait) {
                    Err(RecvTimeoutError::Timeout) => {}
                    _ => break SamplerEnd::Stopped,
                }
                tick += 1;
                match sampler.sample() {
                    Ok(Reading::Sample(s)) => sink.push(s),
                    Ok(Reading::Baseline { .. }) => {}
                    Err(MonitorError::TargetGone(_)) => break SamplerEnd::TargetGone,
                    Err(e) => break SamplerEnd::Failed(e.to_string()),
                }
            };
            sink.end(end);
        })
        .map_err(|e| MonitorError::Unreadable {
            pid,
            reason: e.to_string(),
        })?;
    Ok(SamplerHandle {
        stop_tx: Some(stop_tx),
        thread: Some(thread),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResourceSummary {
    pub cpu: AggregateStats,
    pub rss: AggregateStats,
    pub peak_rss_bytes: u64,
    pub duration_s: f64,
    pub sample_count: u64,
    pub first_at_ns: u64,
    pub last_at_ns: u64,
}

impl ResourceSummary {
    /// Summary of the concatenation of two sample runs.
    pub fn merge(&self, other: &ResourceSummary) -> ResourceSummary {
        let first = self.first_at_ns.min(other.first_at_ns);
        let last = self.last_at_ns.max(other.last_at_ns);
        ResourceSummary {
            cpu: self.cpu.merge(&other.cpu),
            rss: self.rss.merge(&other.rss),
            peak_rss_bytes: self.peak_rss_bytes.max(other.peak_rss_bytes),
            duration_s: (last - first) as f64 / 1e9,
            sample_count: self.sample_count + other.sample_count,
            first_at_ns: first,
            last_at_ns: last,
        }
    }
}

/// CPU (whole-host convention) and RSS statistics over a sample run.
pub fn summarize(samples: &[ResourceSample]) -> Result<ResourceSummary, MonitorError> {
    let (first, last) = match (samples.first(), samples.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(MetricsError::EmptySample.into()),
    };
    let cpu: Vec<f64> = samples.iter().map(|s| s.cpu_total_fraction).collect();
    let rss: Vec<f64> = samples.iter().map(|s| s.rss_bytes as f64).collect();
    Ok(ResourceSummary {
        cpu: aggregate(&cpu)?,
        rss: aggregate(&rss)?,
        peak_rss_bytes: samples.iter().map(|s| s.rss_bytes).max().unwrap_or(0),
        duration_s: last.at_ns.saturating_sub(first.at_ns) as f64 / 1e9,
        sample_count: samples.len() as u64,
        first_at_ns: first.at_ns,
        last_at_ns: last.at_ns,
    })
}
