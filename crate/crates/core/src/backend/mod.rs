//! Scoring backends.
//!
//! A backend scores target tokens under teacher forcing: given a context and
//! a list of targets, it returns for every target its natural-log
//! probability conditioned on `context ++ targets[..j]`, together with the
//! backend's own most probable token for that same conditioning.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::{BackendError, TokenId};

mod delay;
mod markov;
mod remote;
mod server;
mod trace;
mod uniform;

pub use delay::DelayBackend;
pub use markov::MarkovBackend;
pub use remote::{RemoteBackend, RemoteOptions};
pub use server::{serve, serve_with, ServerHandle, ServerOptions};
pub use trace::{RecordingBackend, TraceBackend, TRACE_FORMAT_TAG};
pub use uniform::UniformBackend;

pub const PROTOCOL_VERSION: u32 = 1;

/// Per-target output of a single `score_window` call.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenScore {
    pub logprob_nats: f64,
    pub argmax_id: TokenId,
}

/// One scored position of an evaluation sequence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredToken {
    /// Index within the evaluation sequence.
    pub position: usize,
    pub token_id: TokenId,
    pub logprob_nats: f64,
    pub argmax_id: TokenId,
    /// Number of tokens the backend conditioned on.
    pub context_len: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendInfo {
    /// Label such as `markov-k3` or `llama-3.2-1b-awq4`.
    pub model_id: String,
    pub vocab_size: u32,
    pub bos_id: Option<TokenId>,
    pub deterministic: bool,
    /// Whether `p(x | ∅)` is defined, either natively or through a BOS token.
    pub scores_empty_context: bool,
    pub reported_peak_mem_bytes: Option<u64>,
}

pub trait ScoringBackend: Send + Sync {
    fn info(&self) -> BackendInfo;

    /// Maximum number of concurrent `score_window` calls; `None` is unlimited.
    fn max_parallelism(&self) -> Option<usize> {
        None
    }

    fn score_window(
        &self,
        context: &[TokenId],
        targets: &[TokenId],
    ) -> Result<Vec<TokenScore>, BackendError>;
}

impl<B: ScoringBackend + ?Sized> ScoringBackend for Box<B> {
    fn info(&self) -> BackendInfo {
        (**self).info()
    }

    fn max_parallelism(&self) -> Option<usize> {
        (**self).max_parallelism()
    }

    fn score_window(
        &self,
        context: &[TokenId],
        targets: &[TokenId],
    ) -> Result<Vec<TokenScore>, BackendError> {
        (**self).score_window(context, targets)
    }
}

impl<B: ScoringBackend + ?Sized> ScoringBackend for Arc<B> {
    fn info(&self) -> BackendInfo {
        (**self).info()
    }

    fn max_parallelism(&self) -> Option<usize> {
        (**self).max_parallelism()
    }

    fn score_window(
        &self,
        context: &[TokenId],
        targets: &[TokenId],
    ) -> Result<Vec<TokenScore>, BackendError> {
        (**self).score_window(context, targets)
    }
}

/// Reject requests that no backend can answer.
pub fn check_request(
    vocab_size: u32,
    context: &[TokenId],
    targets: &[TokenId],
) -> Result<(), BackendError> {
    if targets.is_empty() {
        return Err(BackendError::BadRequest("targets must be non-empty".into()));
    }
    if let Some(&t) = context.iter().chain(targets).find(|&&t| t >= vocab_size) {
        return Err(BackendError::BadRequest(format!(
            "token id {t} >= vocab_size {vocab_size}"
        )));
    }
    Ok(())
}

/// Validate a backend response against the request it answers.
pub fn check_response(targets: &[TokenId], scores: &[TokenScore]) -> Result<(), BackendError> {
    if scores.len() != targets.len() {
        return Err(BackendError::ContractViolation(format!(
            "{} scores returned for {} targets",
            scores.len(),
            targets.len()
        )));
    }
    for (j, s) in scores.iter().enumerate() {
        if !s.logprob_nats.is_finite() {
            return Err(BackendError::ContractViolation(format!(
                "non-finite logprob {} at target {j}",
                s.logprob_nats
            )));
        }
        if s.logprob_nats > 0.0 {
            return Err(BackendError::ContractViolation(format!(
                "positive logprob {} at target {j}",
                s.logprob_nats
            )));
        }
    }
    Ok(())
}

/// 64-bit FNV-1a over little-endian 4-byte token ids.
#[derive(Debug, Clone, Copy)]
pub struct ContextHasher(u64);

impl ContextHasher {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;

    pub fn new() -> Self {
        Self(Self::OFFSET)
    }

    pub fn update(&mut self, id: TokenId) {
        for b in id.to_le_bytes() {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(Self::PRIME);
        }
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

impl Default for ContextHasher {
    fn default() -> Self {
        Self::new()
    }
}

pub fn context_hash(context: &[TokenId]) -> u64 {
    let mut h = ContextHasher::new();
    for &t in context {
        h.update(t);
    }
    h.finish()
}
