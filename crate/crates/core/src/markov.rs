//! Exact k-order Markov language model with add-λ smoothing.
//!
//! Counts are kept for every context length `0..=k`, so the conditional
//! distribution is defined for any amount of available context, including
//! none. For a context `c` (the last `min(k, len)` tokens) and token `t`:
//!
//! ```text
//! p(t | c) = (count(c, t) + λ) / (count(c) + λ·V)
//! ```
//!
//! A context never seen during fitting has `count(c) = 0` and therefore the
//! uniform distribution `1/V`.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Document;
use crate::rng::SplitMix64;
use crate::{Error, Result, TokenId};

pub const MODEL_FORMAT_TAG: &str = "lenbench-markov-v1";

/// Successor counts of one context.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ContextCounts {
    pub total: u64,
    pub next: BTreeMap<TokenId, u64>,
}

impl ContextCounts {
    /// Most frequent successor, smallest id on ties. `None` when empty.
    fn mode(&self) -> Option<TokenId> {
        let mut best: Option<(TokenId, u64)> = None;
        for (&t, &c) in &self.next {
            if best.is_none_or(|(_, bc)| c > bc) {
                best = Some((t, c));
            }
        }
        best.map(|(t, _)| t)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarkovModel {
    order: usize,
    vocab_size: u32,
    lambda: f64,
    contexts: HashMap<Vec<TokenId>, ContextCounts>,
}

impl MarkovModel {
    /// Count transitions over `docs`.
    ///
    /// Position `j >= 1` of each document contributes one count under every
    /// context length `0..=min(k, j)`. Position 0 contributes nothing.
    pub fn fit(
        docs: impl IntoIterator<Item = Document>,
        order: usize,
        vocab_size: u32,
        lambda: f64,
    ) -> Result<Self> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::config(format!("lambda must be > 0, got {lambda}")));
        }
        if vocab_size < 2 {
            return Err(Error::config(format!(
                "vocab_size must be >= 2, got {vocab_size}"
            )));
        }
        let mut contexts: HashMap<Vec<TokenId>, ContextCounts> = HashMap::new();
        let mut n_docs = 0usize;
        for doc in docs {
            n_docs += 1;
            let toks = &doc.tokens;
            if let Some((pos, &t)) = toks.iter().enumerate().find(|(_, &t)| t >= vocab_size) {
                return Err(Error::data(format!(
                    "doc {} position {pos}: token id {t} >= vocab_size {vocab_size}",
                    doc.doc_id
                )));
            }
            for j in 1..toks.len() {
                for m in 0..=order.min(j) {
                    let entry = contexts.entry(toks[j - m..j].to_vec()).or_default();
                    entry.total += 1;
                    *entry.next.entry(toks[j]).or_insert(0) += 1;
                }
            }
        }
        if n_docs == 0 {
            return Err(Error::data("cannot fit a Markov model on an empty corpus"));
        }
        Ok(Self {
            order,
            vocab_size,
            lambda,
            contexts,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn vocab_size(&self) -> u32 {
        self.vocab_size
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Number of distinct contexts (over all lengths) with at least one count.
    pub fn n_contexts(&self) -> usize {
        self.contexts.len()
    }

    /// The conditioning suffix actually used for `context`.
    pub fn effective_context<'a>(&self, context: &'a [TokenId]) -> &'a [TokenId] {
        &context[context.len() - self.order.min(context.len())..]
    }

    pub fn counts(&self, context: &[TokenId]) -> Option<&ContextCounts> {
        self.contexts.get(self.effective_context(context))
    }

    pub fn context_count(&self, context: &[TokenId]) -> u64 {
        self.counts(context).map_or(0, |c| c.total)
    }

    pub fn transition_count(&self, context: &[TokenId], token: TokenId) -> u64 {
        self.counts(context)
            .and_then(|c| c.next.get(&token).copied())
            .unwrap_or(0)
    }

    fn numerator_denominator(&self, context: &[TokenId], token: TokenId) -> (f64, f64) {
        let (num, den) = match self.counts(context) {
            Some(c) => (c.next.get(&token).copied().unwrap_or(0), c.total),
            None => (0, 0),
        };
        (
            num as f64 + self.lambda,
            den as f64 + self.lambda * f64::from(self.vocab_size),
        )
    }

    pub fn prob(&self, context: &[TokenId], token: TokenId) -> f64 {
        let (num, den) = self.numerator_denominator(context, token);
        num / den
    }

    /// Natural-log probability, computed as `ln(num) - ln(den)`.
    pub fn log_prob(&self, context: &[TokenId], token: TokenId) -> f64 {
        let (num, den) = self.numerator_denominator(context, token);
        num.ln() - den.ln()
    }

    /// Most probable next token; ties go to the smallest id.
    pub fn argmax(&self, context: &[TokenId]) -> TokenId {
        // Any observed successor has count >= 1 and beats every unseen token.
        self.counts(context)
            .and_then(ContextCounts::mode)
            .unwrap_or(0)
    }

    /// Sample `n` tokens autoregressively.
    ///
    /// The generator is SplitMix64 seeded with `seed`. Each step draws
    /// `u ∈ [0, 1)` and returns the first token id (in id order) whose
    /// cumulative probability exceeds `u`.
    pub fn generate(&self, n: usize, seed: u64) -> Vec<TokenId> {
        let mut rng = SplitMix64::new(seed);
        let mut out: Vec<TokenId> = Vec::with_capacity(n);
        for _ in 0..n {
            let u = rng.next_f64();
            let tok = self.inverse_cdf(&out, u);
            out.push(tok);
        }
        out
    }

    fn inverse_cdf(&self, context: &[TokenId], u: f64) -> TokenId {
        let v = self.vocab_size;
        let lambda = self.lambda;
        let empty = ContextCounts::default();
        let counts = self.counts(context).unwrap_or(&empty);
        let den = counts.total as f64 + lambda * f64::from(v);
        let target = u * den;
        // Tokens without counts carry mass λ each; walk the runs between
        // observed successors instead of visiting all V ids.
        let unseen_run = |from: TokenId, acc: f64, limit: TokenId| -> TokenId {
            let k = ((target - acc) / lambda).floor();
            let k = if k.is_finite() && k > 0.0 {
                k as u64
            } else {
                0
            };
            (u64::from(from) + k).min(u64::from(limit)) as TokenId
        };
        let mut acc = 0.0;
        let mut next_id: TokenId = 0;
        for (&tok, &cnt) in &counts.next {
            let gap = f64::from(tok - next_id) * lambda;
            if tok > next_id && target < acc + gap {
                return unseen_run(next_id, acc, tok - 1);
            }
            acc += gap;
            let mass = cnt as f64 + lambda;
            if target < acc + mass {
                return tok;
            }
            acc += mass;
            next_id = tok + 1;
        }
        if next_id >= v {
            return v - 1;
        }
        unseen_run(next_id, acc, v - 1)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        serde_json::to_writer(&mut out, &self.to_file())
            .map_err(|e| Error::data(format!("serializing model: {e}")))?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        out.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let parsed: ModelFile = serde_json::from_reader(BufReader::new(file))
            .map_err(|e| Error::data(format!("{}: malformed model file: {e}", path.display())))?;
        Self::from_file(parsed)
    }

    fn to_file(&self) -> ModelFile {
        let mut entries: Vec<ContextEntry> = self
            .contexts
            .iter()
            .map(|(ctx, counts)| ContextEntry {
                ctx: ctx.clone(),
                next: counts.next.iter().map(|(&t, &c)| (t, c)).collect(),
            })
            .collect();
        entries.sort_by(|a, b| {
            a.ctx
                .len()
                .cmp(&b.ctx.len())
                .then_with(|| a.ctx.cmp(&b.ctx))
        });
        ModelFile {
            format: MODEL_FORMAT_TAG.to_string(),
            k: self.order,
            vocab_size: self.vocab_size,
            lambda: self.lambda,
            counts: entries,
        }
    }

    fn from_file(file: ModelFile) -> Result<Self> {
        if file.format != MODEL_FORMAT_TAG {
            return Err(Error::data(format!(
                "unsupported model format {:?}",
                file.format
            )));
        }
        if file.lambda.is_nan() || file.lambda <= 0.0 || file.vocab_size < 2 {
            return Err(Error::data("model header has invalid lambda or vocab_size"));
        }
        let mut contexts = HashMap::with_capacity(file.counts.len());
        for entry in file.counts {
            if entry.ctx.len() > file.k {
                return Err(Error::data(format!(
                    "context {:?} is longer than the model order {}",
                    entry.ctx, file.k
                )));
            }
            let mut counts = ContextCounts::default();
            for (t, c) in entry.next {
                if t >= file.vocab_size {
                    return Err(Error::data(format!("token id {t} >= vocab_size")));
                }
                counts.total += c;
                counts.next.insert(t, c);
            }
            contexts.insert(entry.ctx, counts);
        }
        Ok(Self {
            order: file.k,
            vocab_size: file.vocab_size,
            lambda: file.lambda,
            contexts,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct ContextEntry {
    ctx: Vec<TokenId>,
    next: Vec<(TokenId, u64)>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    k: usize,
    vocab_size: u32,
    #[serde(serialize_with = "crate::numfmt::serialize")]
    lambda: f64,
    counts: Vec<ContextEntry>,
}
