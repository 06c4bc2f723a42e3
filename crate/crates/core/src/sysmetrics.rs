//! Latency, token-cost and memory instrumentation.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// One backend call as seen by the harness.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CallSample {
    pub wall_time_s: f64,
    pub context_len: usize,
    pub target_len: usize,
}

/// Run `call` and measure its wall time on a monotonic clock.
///
/// Errors from `call` propagate and the timing is dropped.
pub fn timed_call<T, E>(
    context_len: usize,
    target_len: usize,
    call: impl FnOnce() -> std::result::Result<T, E>,
) -> std::result::Result<(T, CallSample), E> {
    let start = Instant::now();
    let out = call()?;
    let sample = CallSample {
        wall_time_s: start.elapsed().as_secs_f64(),
        context_len,
        target_len,
    };
    Ok((out, sample))
}

/// Total tokens the backend had to process: context plus targets, per call.
pub fn cost_tokens(samples: &[CallSample]) -> u64 {
    samples
        .iter()
        .map(|s| (s.context_len + s.target_len) as u64)
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    #[serde(serialize_with = "crate::numfmt::serialize")]
    pub total_s: f64,
    #[serde(serialize_with = "crate::numfmt::serialize")]
    pub mean_s: f64,
    #[serde(serialize_with = "crate::numfmt::serialize")]
    pub p50_s: f64,
    #[serde(serialize_with = "crate::numfmt::serialize")]
    pub p95_s: f64,
}

/// Nearest-rank percentile over an ascending slice: element
/// `ceil(p/100 · n) − 1`.
pub fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let rank = ((p / 100.0) * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

pub fn latency_stats(samples: &[CallSample]) -> Result<LatencyStats> {
    if samples.is_empty() {
        return Err(Error::data("latency_stats of an empty sample list"));
    }
    let mut times: Vec<f64> = samples.iter().map(|s| s.wall_time_s).collect();
    times.sort_by(f64::total_cmp);
    let total_s: f64 = times.iter().sum();
    Ok(LatencyStats {
        total_s,
        mean_s: total_s / times.len() as f64,
        p50_s: nearest_rank(&times, 50.0),
        p95_s: nearest_rank(&times, 95.0),
    })
}

/// The non-deterministic part of an evaluation record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SystemMetrics {
    /// Per-call statistics; `total_s` sums call wall times.
    pub latency: LatencyStats,
    /// End-to-end wall time of the run.
    #[serde(serialize_with = "crate::numfmt::serialize")]
    pub makespan_s: f64,
    pub peak_mem_bytes: Option<u64>,
}

/// Larger of the harness RSS and the backend-reported peak, if either exists.
pub fn peak_memory(harness_rss: Option<u64>, backend_reported: Option<u64>) -> Option<u64> {
    match (harness_rss, backend_reported) {
        (Some(a), Some(b)) => Some(a.max(b)),
        (a, b) => a.or(b),
    }
}

fn proc_status_kb(key: &str) -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    status
        .lines()
        .find_map(|l| l.strip_prefix(key))
        .and_then(|rest| {
            rest.trim()
                .trim_end_matches("kB")
                .trim()
                .parse::<u64>()
                .ok()
        })
        .map(|kb| kb * 1024)
}

/// Current resident set size of this process. Linux only.
pub fn current_rss() -> Option<u64> {
    proc_status_kb("VmRSS:")
}

/// High-water resident set size of this process. Linux only.
pub fn peak_rss() -> Option<u64> {
    proc_status_kb("VmHWM:")
}
