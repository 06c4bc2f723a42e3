//! Trace recording and replay.
//!
//! A trace file is JSONL. The first line is a header
//! `{"format":"lenbench-trace-v1","model_id":"..."}`; every following line
//! records one scored token as
//! `{"ctx":"<16-hex FNV-1a>","t":id,"lp":float,"am":id}`, keyed by the hash
//! of the complete token context the backend conditioned on.
//!
//! The header may also carry `vocab_size`, `bos_id` and `empty_context`,
//! describing the recorded backend. Readers treat them as optional.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{BackendInfo, ContextHasher, ScoringBackend, TokenScore};
use crate::{BackendError, Error, Result, TokenId};

pub const TRACE_FORMAT_TAG: &str = "lenbench-trace-v1";

#[derive(Serialize, Deserialize)]
struct TraceHeader {
    format: String,
    model_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    vocab_size: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bos_id: Option<TokenId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    empty_context: Option<bool>,
}

#[derive(Serialize)]
struct TraceLineOut<'a> {
    ctx: &'a str,
    t: TokenId,
    #[serde(serialize_with = "crate::numfmt::serialize")]
    lp: f64,
    am: TokenId,
}

#[derive(Deserialize)]
struct TraceLineIn {
    ctx: String,
    t: TokenId,
    lp: f64,
    am: TokenId,
}

/// Replays recorded scores. Unrecorded queries are hard errors.
#[derive(Debug)]
pub struct TraceBackend {
    info: BackendInfo,
    entries: HashMap<(u64, TokenId), TokenScore>,
    n_lines: usize,
}

impl TraceBackend {
    pub fn open(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(file).lines();
        let where_ = |n: usize| format!("{} line {n}", path.display());
        let header_line = lines
            .next()
            .ok_or_else(|| Error::data(format!("{}: empty trace file", path.display())))?
            .map_err(|e| Error::io(path, e))?;
        let header: TraceHeader = serde_json::from_str(&header_line)
            .map_err(|e| Error::data(format!("{}: malformed trace header: {e}", where_(1))))?;
        if header.format != TRACE_FORMAT_TAG {
            return Err(Error::data(format!(
                "{}: unsupported trace format {:?}",
                where_(1),
                header.format
            )));
        }
        let mut entries = HashMap::new();
        let mut n_lines = 0;
        let mut max_id = 0;
        for (i, line) in lines.enumerate() {
            let line_no = i + 2;
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: TraceLineIn = serde_json::from_str(&line)
                .map_err(|e| Error::data(format!("{}: malformed entry: {e}", where_(line_no))))?;
            let hash = u64::from_str_radix(&rec.ctx, 16)
                .ok()
                .filter(|_| rec.ctx.len() == 16)
                .ok_or_else(|| {
                    Error::data(format!(
                        "{}: bad context hash {:?}",
                        where_(line_no),
                        rec.ctx
                    ))
                })?;
            let score = TokenScore {
                logprob_nats: rec.lp,
                argmax_id: rec.am,
            };
            if let Some(prev) = entries.insert((hash, rec.t), score) {
                if prev.logprob_nats.to_bits() != score.logprob_nats.to_bits()
                    || prev.argmax_id != score.argmax_id
                {
                    return Err(Error::data(format!(
                        "{}: conflicting entry for context {} target {}",
                        where_(line_no),
                        rec.ctx,
                        rec.t
                    )));
                }
            }
            max_id = max_id.max(rec.t).max(rec.am);
            n_lines += 1;
        }
        let vocab_size = header.vocab_size.unwrap_or(max_id + 1);
        Ok(Self {
            info: BackendInfo {
                model_id: header.model_id,
                vocab_size,
                bos_id: header.bos_id,
                deterministic: true,
                scores_empty_context: header.empty_context.unwrap_or(header.bos_id.is_some()),
                reported_peak_mem_bytes: None,
            },
            entries,
            n_lines,
        })
    }

    /// Number of data lines read (duplicates included).
    pub fn n_lines(&self) -> usize {
        self.n_lines
    }

    /// Number of distinct (context, target) keys.
    pub fn n_entries(&self) -> usize {
        self.entries.len()
    }
}

impl ScoringBackend for TraceBackend {
    fn info(&self) -> BackendInfo {
        self.info.clone()
    }

    fn score_window(
        &self,
        context: &[TokenId],
        targets: &[TokenId],
    ) -> Result<Vec<TokenScore>, BackendError> {
        if targets.is_empty() {
            return Err(BackendError::BadRequest("targets must be non-empty".into()));
        }
        let mut hasher = ContextHasher::new();
        for &t in context {
            hasher.update(t);
        }
        let mut out = Vec::with_capacity(targets.len());
        for &t in targets {
            let ctx_hash = hasher.finish();
            let score = self
                .entries
                .get(&(ctx_hash, t))
                .ok_or(BackendError::TraceMiss {
                    ctx_hash,
                    target: t,
                })?;
            out.push(*score);
            hasher.update(t);
        }
        Ok(out)
    }
}

/// Wraps a backend and appends every scored token to a trace file.
pub struct RecordingBackend<B> {
    inner: B,
    path: PathBuf,
    out: Mutex<BufWriter<File>>,
}

impl<B: ScoringBackend> RecordingBackend<B> {
    pub fn create(inner: B, path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        let info = inner.info();
        let header = TraceHeader {
            format: TRACE_FORMAT_TAG.to_string(),
            model_id: info.model_id,
            vocab_size: Some(info.vocab_size),
            bos_id: info.bos_id,
            empty_context: Some(info.scores_empty_context),
        };
        serde_json::to_writer(&mut out, &header)
            .map_err(|e| Error::data(format!("writing trace header: {e}")))?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        Ok(Self {
            inner,
            path: path.to_path_buf(),
            out: Mutex::new(out),
        })
    }

    pub fn flush(&self) -> Result<()> {
        self.out
            .lock()
            .expect("trace writer poisoned")
            .flush()
            .map_err(|e| Error::io(&self.path, e))
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }
}

impl<B: ScoringBackend> ScoringBackend for RecordingBackend<B> {
    fn info(&self) -> BackendInfo {
        self.inner.info()
    }

    fn max_parallelism(&self) -> Option<usize> {
        self.inner.max_parallelism()
    }

    fn score_window(
        &self,
        context: &[TokenId],
        targets: &[TokenId],
    ) -> Result<Vec<TokenScore>, BackendError> {
        let scores = self.inner.score_window(context, targets)?;
        let mut hasher = ContextHasher::new();
        for &t in context {
            hasher.update(t);
        }
        let mut buf = Vec::with_capacity(targets.len() * 80);
        for (&t, s) in targets.iter().zip(&scores) {
            let ctx = format!("{:016x}", hasher.finish());
            let line = TraceLineOut {
                ctx: &ctx,
                t,
                lp: s.logprob_nats,
                am: s.argmax_id,
            };
            serde_json::to_writer(&mut buf, &line)
                .map_err(|e| BackendError::ContractViolation(format!("unencodable score: {e}")))?;
            buf.push(b'\n');
            hasher.update(t);
        }
        self.out
            .lock()
            .expect("trace writer poisoned")
            .write_all(&buf)?;
        Ok(scores)
    }
}

impl<B> Drop for RecordingBackend<B> {
    fn drop(&mut self) {
        if let Ok(mut out) = self.out.lock() {
            let _ = out.flush();
        }
    }
}
