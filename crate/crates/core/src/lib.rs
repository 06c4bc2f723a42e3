//! Length-aware language-model evaluation.
//!
//! Scores packed token sequences under a direct-accumulation protocol and a
//! windowed (sliding) protocol, across sequence lengths and window sizes, and
//! records latency, token compute cost and memory alongside perplexity and
//! next-token accuracy.
//!
//! The crate is organised bottom-up:
//!
//! - [`corpus`]: document ingestion and fixed-length sequence packing.
//! - [`markov`]: an exact add-λ smoothed k-order Markov model, used as an
//!   oracle backend.
//! - [`backend`]: the scoring contract and its implementations (Markov
//!   adapter, trace record/replay, HTTP client and server, delay wrapper).
//! - [`protocol`]: window planning and protocol execution.
//! - [`metrics`]: window loss, aggregation, perplexity, accuracy, deltas.
//! - [`sysmetrics`]: latency, cost and memory instrumentation.
//! - [`report`]: JSON/CSV/plot-data/text-table emission.
//! - [`cli`]: the `lenbench` command-line front end.

pub mod backend;
pub mod cli;
pub mod corpus;
pub mod error;
pub mod markov;
pub mod metrics;
pub mod numfmt;
pub mod protocol;
pub mod report;
pub mod rng;
pub mod sysmetrics;

pub use error::{BackendError, Error, Result};

/// Token identifier. Vocabularies are bounded by `u32`.
pub type TokenId = u32;
