//! Window planning and protocol execution.
//!
//! Two protocols are supported:
//!
//! - **non-sliding** (direct accumulation): one backend call per sequence,
//!   every token conditioned on the whole preceding sequence.
//! - **sliding**: the sequence is cut into windows of `w` tokens whose starts
//!   are `stride` apart. Under `window_local` context each window is scored
//!   from scratch; under `full_prefix` each window sees everything before it.
//!
//! Per-window losses are reduced either with equal weight per window
//! (`window_mean`, `L = mean_i L_i`) or with equal weight per token
//! (`token_mean`). Perplexity is `exp(L)`.

use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backend::{check_response, BackendInfo, ScoredToken, ScoringBackend, TokenScore};
use crate::corpus::{pack_sequences, Document, Packing, TokenSequence};
use crate::metrics::{self, delta_metrics, DeltaRow, EvalRecord, NeumaierSum, WindowTotal};
use crate::sysmetrics::{self, CallSample, SystemMetrics};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextPolicy {
    #[default]
    WindowLocal,
    FullPrefix,
}

impl FromStr for ContextPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "window-local" | "window_local" => Ok(Self::WindowLocal),
            "full-prefix" | "full_prefix" => Ok(Self::FullPrefix),
            other => Err(Error::config(format!("unknown context policy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowPlan {
    pub window_size: usize,
    pub stride: usize,
    pub context_policy: ContextPolicy,
    pub include_remainder: bool,
}

impl WindowPlan {
    /// Disjoint windows (`stride = window_size`), window-local context.
    pub fn chunked(window_size: usize) -> Self {
        Self {
            window_size,
            stride: window_size,
            context_policy: ContextPolicy::WindowLocal,
            include_remainder: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_size == 0 || self.stride == 0 {
            return Err(Error::config(format!(
                "window size and stride must be >= 1 (got w={}, s={})",
                self.window_size, self.stride
            )));
        }
        Ok(())
    }
}

/// Scored range `[start, end)`; tokens from `context_start` are visible.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub start: usize,
    pub end: usize,
    pub context_start: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    NonSliding,
    Sliding(WindowPlan),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    WindowMean,
    TokenMean,
}

impl FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "window-mean" | "window_mean" => Ok(Self::WindowMean),
            "token-mean" | "token_mean" => Ok(Self::TokenMean),
            other => Err(Error::config(format!("unknown aggregation {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub variant: Variant,
    pub aggregation: Aggregation,
    /// Exclude position 0 of every sequence (and, under window-local context,
    /// the first position of every window) from loss and accuracy.
    pub skip_first_token: bool,
}

impl ProtocolConfig {
    pub fn non_sliding() -> Self {
        Self {
            variant: Variant::NonSliding,
            aggregation: Aggregation::WindowMean,
            skip_first_token: false,
        }
    }

    pub fn sliding(plan: WindowPlan) -> Self {
        Self {
            variant: Variant::Sliding(plan),
            aggregation: Aggregation::WindowMean,
            skip_first_token: false,
        }
    }

    pub fn with_aggregation(mut self, aggregation: Aggregation) -> Self {
        self.aggregation = aggregation;
        self
    }

    pub fn with_skip_first_token(mut self, skip: bool) -> Self {
        self.skip_first_token = skip;
        self
    }

    pub fn window_plan(&self) -> Option<&WindowPlan> {
        match &self.variant {
            Variant::NonSliding => None,
            Variant::Sliding(p) => Some(p),
        }
    }

    pub fn name(&self) -> &'static str {
        match self.variant {
            Variant::NonSliding => "non_sliding",
            Variant::Sliding(_) => "sliding",
        }
    }
}

/// Whether the first token of a sequence/window is scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipFirst {
    /// Skip only when the backend cannot score an empty context.
    #[default]
    Auto,
    On,
    Off,
}

impl SkipFirst {
    pub fn resolve(self, info: &BackendInfo) -> bool {
        match self {
            SkipFirst::Auto => !info.scores_empty_context,
            SkipFirst::On => true,
            SkipFirst::Off => false,
        }
    }
}

impl FromStr for SkipFirst {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(Self::Auto),
            "on" | "true" => Ok(Self::On),
            "off" | "false" => Ok(Self::Off),
            other => Err(Error::config(format!(
                "unknown skip-first-token mode {other:?}"
            ))),
        }
    }
}

/// Windows for a sequence of `len` tokens.
///
/// Starts are `0, s, 2s, …` while `start + w <= len`; with `s = 1` that is
/// `len − w + 1` windows. A window at least as long as the sequence gives the
/// single window `[0, len)`. With `include_remainder`, tokens past the last
/// full window get one shorter final window starting at the next stride
/// position.
pub fn plan_windows(len: usize, plan: &WindowPlan) -> Vec<Window> {
    let ctx = |start: usize| match plan.context_policy {
        ContextPolicy::WindowLocal => start,
        ContextPolicy::FullPrefix => 0,
    };
    let (w, s) = (plan.window_size.max(1), plan.stride.max(1));
    if len == 0 {
        return Vec::new();
    }
    if w >= len {
        return vec![Window {
            start: 0,
            end: len,
            context_start: 0,
        }];
    }
    let mut out = Vec::with_capacity((len - w) / s + 2);
    let mut start = 0;
    while start + w <= len {
        out.push(Window {
            start,
            end: start + w,
            context_start: ctx(start),
        });
        start += s;
    }
    let last_end = out.last().map_or(0, |win| win.end);
    if plan.include_remainder && last_end < len && start < len {
        out.push(Window {
            start,
            end: len,
            context_start: ctx(start),
        });
    }
    out
}

/// One backend call: condition on `[context_start, score_start)`, score
/// `[score_start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CallPlan {
    pub window: Window,
    pub score_start: usize,
}

impl CallPlan {
    pub fn context_len(&self) -> usize {
        self.score_start - self.window.context_start
    }

    pub fn target_len(&self) -> usize {
        self.window.end - self.score_start
    }
}

/// The backend calls made for every sequence of length `len`. Windows left
/// with nothing to score after `skip_first_token` are dropped.
pub fn plan_calls(len: usize, config: &ProtocolConfig) -> Vec<CallPlan> {
    let windows = match &config.variant {
        Variant::NonSliding => vec![Window {
            start: 0,
            end: len,
            context_start: 0,
        }],
        Variant::Sliding(plan) => plan_windows(len, plan),
    };
    windows
        .into_iter()
        .map(|window| {
            // the window's first token has no in-window context when the
            // window starts the sequence or context is window-local
            let starved = window.start == window.context_start;
            let skip = config.skip_first_token && starved;
            CallPlan {
                window,
                score_start: window.start + usize::from(skip),
            }
        })
        .filter(|c| c.score_start < c.window.end)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    /// Upper bound on concurrent backend calls.
    pub parallelism: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { parallelism: 1 }
    }
}

/// Measurements collected while a protocol runs.
#[derive(Debug, Clone, Default)]
pub struct Instruments {
    pub samples: Vec<CallSample>,
    pub harness_rss_peak: Option<u64>,
    pub makespan_s: f64,
}

impl Instruments {
    fn sample_rss(&mut self) {
        if let Some(rss) = sysmetrics::current_rss() {
            self.harness_rss_peak = Some(self.harness_rss_peak.map_or(rss, |p| p.max(rss)));
        }
    }
}

pub fn run_protocol<B: ScoringBackend + ?Sized>(
    backend: &B,
    sequences: &[TokenSequence],
    config: &ProtocolConfig,
    options: &RunOptions,
) -> Result<EvalRecord> {
    run_protocol_instrumented(
        backend,
        sequences,
        config,
        options,
        &mut Instruments::default(),
    )
}

type CallResult = Result<(Vec<TokenScore>, CallSample)>;

pub fn run_protocol_instrumented<B: ScoringBackend + ?Sized>(
    backend: &B,
    sequences: &[TokenSequence],
    config: &ProtocolConfig,
    options: &RunOptions,
    instruments: &mut Instruments,
) -> Result<EvalRecord> {
    let first = sequences
        .first()
        .ok_or_else(|| Error::data("run_protocol needs at least one sequence"))?;
    let seq_len = first.len();
    if let Some(bad) = sequences.iter().find(|s| s.len() != seq_len) {
        return Err(Error::data(format!(
            "mixed sequence lengths: seq {} has {} tokens, expected {seq_len}",
            bad.seq_id,
            bad.len()
        )));
    }
    if seq_len == 0 {
        return Err(Error::data("sequences are empty"));
    }
    if let Some(plan) = config.window_plan() {
        plan.validate()?;
    }
    let calls = plan_calls(seq_len, config);
    let jobs: Vec<(usize, usize)> = (0..sequences.len())
        .flat_map(|s| (0..calls.len()).map(move |c| (s, c)))
        .collect();

    let run_one = |&(s, c): &(usize, usize)| -> CallResult {
        let seq = &sequences[s];
        let call = &calls[c];
        let context = &seq.tokens[call.window.context_start..call.score_start];
        let targets = &seq.tokens[call.score_start..call.window.end];
        let located = |e| {
            Error::backend(
                format!(
                    "seq {} window {c} [{}, {})",
                    seq.seq_id, call.window.start, call.window.end
                ),
                e,
            )
        };
        let (scores, sample) = sysmetrics::timed_call(context.len(), targets.len(), || {
            backend.score_window(context, targets)
        })
        .map_err(located)?;
        check_response(targets, &scores).map_err(located)?;
        Ok((scores, sample))
    };

    let parallelism = options
        .parallelism
        .min(backend.max_parallelism().unwrap_or(usize::MAX))
        .max(1);
    instruments.sample_rss();
    let started = Instant::now();
    let results: Vec<(Vec<TokenScore>, CallSample)> = if parallelism == 1 {
        jobs.iter().map(run_one).collect::<Result<_>>()?
    } else {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(parallelism)
            .build()
            .map_err(|e| Error::config(format!("cannot start worker pool: {e}")))?;
        pool.install(|| jobs.par_iter().map(run_one).collect::<Result<_>>())?
    };
    instruments.makespan_s = started.elapsed().as_secs_f64();

    // Single reducer, in (sequence, window) order.
    let mut window_totals = Vec::with_capacity(results.len());
    let mut correct = 0usize;
    let mut scored_buf: Vec<ScoredToken> = Vec::new();
    for (seq_idx, seq_results) in results.chunks(calls.len().max(1)).enumerate() {
        let seq = &sequences[seq_idx];
        for (call, (scores, sample)) in calls.iter().zip(seq_results) {
            scored_buf.clear();
            scored_buf.extend(scores.iter().enumerate().map(|(j, sc)| {
                let position = call.score_start + j;
                ScoredToken {
                    position,
                    token_id: seq.tokens[position],
                    logprob_nats: sc.logprob_nats,
                    argmax_id: sc.argmax_id,
                    context_len: position - call.window.context_start,
                }
            }));
            correct += scored_buf
                .iter()
                .filter(|t| t.argmax_id == t.token_id)
                .count();
            window_totals.push(WindowTotal::from_scored(&scored_buf));
            instruments.samples.push(*sample);
        }
        instruments.sample_rss();
    }

    let (mean_nll, ppl) = metrics::aggregate(&window_totals, config.aggregation)?;
    let nll_sum = window_totals
        .iter()
        .map(|w| w.nll_sum)
        .collect::<NeumaierSum>()
        .value();
    let scored_tokens: usize = window_totals.iter().map(|w| w.count).sum();
    let info = backend.info();
    let latency = sysmetrics::latency_stats(&instruments.samples)?;
    Ok(EvalRecord {
        model_id: info.model_id,
        protocol: *config,
        seq_len,
        n_sequences: sequences.len(),
        n_windows: window_totals.len(),
        scored_tokens,
        correct_tokens: correct,
        nll_sum_nats: nll_sum,
        mean_nll_nats: mean_nll,
        ppl,
        accuracy_pct: metrics::accuracy_pct(correct, scored_tokens),
        cost_tokens: sysmetrics::cost_tokens(&instruments.samples),
        n_calls: instruments.samples.len(),
        skip_first_token: config.skip_first_token,
        system: SystemMetrics {
            latency,
            makespan_s: instruments.makespan_s,
            peak_mem_bytes: sysmetrics::peak_memory(
                instruments.harness_rss_peak,
                info.reported_peak_mem_bytes,
            ),
        },
    })
}

/// How the stride follows the window size in a window sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrideRule {
    /// `stride = w` for every size.
    Chunked,
    Fixed(usize),
}

/// Run one sliding evaluation per window size, everything else fixed.
/// Output is ordered by window size.
pub fn window_sweep<B: ScoringBackend + ?Sized>(
    backend: &B,
    sequences: &[TokenSequence],
    sizes: &[usize],
    template: &ProtocolConfig,
    stride: StrideRule,
    options: &RunOptions,
) -> Result<Vec<(usize, EvalRecord)>> {
    if sizes.is_empty() {
        return Err(Error::config("window sweep needs at least one window size"));
    }
    let base = template
        .window_plan()
        .copied()
        .unwrap_or_else(|| WindowPlan::chunked(1));
    let mut sizes = sizes.to_vec();
    sizes.sort_unstable();
    sizes
        .into_iter()
        .map(|w| {
            let plan = WindowPlan {
                window_size: w,
                stride: match stride {
                    StrideRule::Chunked => w,
                    StrideRule::Fixed(s) => s,
                },
                ..base
            };
            let config = ProtocolConfig {
                variant: Variant::Sliding(plan),
                ..*template
            };
            run_protocol(backend, sequences, &config, options).map(|r| (w, r))
        })
        .collect()
}

/// Pack the corpus at each length and run the same protocol on it.
/// Output is ordered by length.
pub fn length_sweep<B: ScoringBackend + ?Sized>(
    backend: &B,
    docs: &[Document],
    lengths: &[usize],
    config: &ProtocolConfig,
    packing: Packing,
    options: &RunOptions,
) -> Result<Vec<(usize, EvalRecord)>> {
    if lengths.is_empty() {
        return Err(Error::config("length sweep needs at least one length"));
    }
    let mut lengths = lengths.to_vec();
    lengths.sort_unstable();
    lengths
        .into_iter()
        .map(|len| {
            let seqs = pack_sequences(
                docs.iter().cloned(),
                len,
                packing.policy,
                packing.separator_id,
            )?;
            run_protocol(backend, &seqs, config, options).map(|r| (len, r))
        })
        .collect()
}

/// Settings shared by both sides of a protocol comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CompareSettings {
    pub context_policy: ContextPolicy,
    pub aggregation: Aggregation,
    pub skip_first_token: bool,
    pub packing: Packing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub seq_len: usize,
    pub non_sliding: EvalRecord,
    pub sliding: EvalRecord,
    pub delta: DeltaRow,
}

/// Non-sliding vs. chunked sliding (`stride = w`) at every length.
pub fn compare_protocols<B: ScoringBackend + ?Sized>(
    backend: &B,
    docs: &[Document],
    lengths: &[usize],
    window_size: usize,
    settings: &CompareSettings,
    options: &RunOptions,
) -> Result<Vec<Comparison>> {
    if lengths.is_empty() {
        return Err(Error::config("comparison needs at least one length"));
    }
    let non_sliding = ProtocolConfig {
        variant: Variant::NonSliding,
        aggregation: settings.aggregation,
        skip_first_token: settings.skip_first_token,
    };
    let sliding = ProtocolConfig {
        variant: Variant::Sliding(WindowPlan {
            window_size,
            stride: window_size,
            context_policy: settings.context_policy,
            include_remainder: false,
        }),
        ..non_sliding
    };
    let mut lengths = lengths.to_vec();
    lengths.sort_unstable();
    lengths
        .into_iter()
        .map(|len| {
            let seqs = pack_sequences(
                docs.iter().cloned(),
                len,
                settings.packing.policy,
                settings.packing.separator_id,
            )?;
            let ns = run_protocol(backend, &seqs, &non_sliding, options)?;
            let s = run_protocol(backend, &seqs, &sliding, options)?;
            let delta = delta_metrics(&ns, &s)?;
            Ok(Comparison {
                seq_len: len,
                non_sliding: ns,
                sliding: s,
                delta,
            })
        })
        .collect()
}
