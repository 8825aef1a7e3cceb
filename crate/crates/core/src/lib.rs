//! Edge LLM serving gateway and benchmark harness.
//!
//! The crate is organised around the request path and the measurement path:
//!
//! * [`registry`] loads the model pool and its backend endpoints.
//! * [`backends`] adapts llama.cpp-style HTTP servers and a deterministic
//!   simulator behind one contract.
//! * [`gateway`] assembles prompts, proxies to a backend, streams tokens and
//!   derives prefill/decode timings for every completion.
//! * [`metrics`] holds the pure numeric core: throughput, per-token time,
//!   phase shares, aggregates and coefficient-of-variation analysis.
//! * [`monitor`] samples process CPU and RSS and renders Prometheus text.
//! * [`bench`] replays conversation datasets and builds reports.
//! * [`accuracy`] scores two-option fill-in items by cumulative log-likelihood.

pub mod accuracy;
pub mod backends;
pub mod bench;
pub mod exec;
pub mod gateway;
pub mod metrics;
pub mod monitor;
pub mod registry;
pub mod text;

pub use exec::Execution;

/// Version string echoed into reports.
pub const TOOL_VERSION: &str = concat!("edgellm ", env!("CARGO_PKG_VERSION"));
