//! Corpus ingestion and sequence packing.
//!
//! Two on-disk formats are accepted. `jsonl_tokens` starts with a header line
//! `{"format":"lenbench-corpus-v1","vocab_size":N}` followed by one
//! `{"tokens":[...]}` record per document. `raw_text` is split into
//! documents at blank lines and byte-tokenized (vocabulary of 256).

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result, TokenId};

pub const CORPUS_FORMAT_TAG: &str = "lenbench-corpus-v1";
pub const BYTE_VOCAB_SIZE: u32 = 256;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: u64,
    pub tokens: Vec<TokenId>,
}

/// A fixed-length run of tokens carved out of the corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub seq_id: u64,
    pub tokens: Vec<TokenId>,
    /// First and last `doc_id` contributing tokens.
    pub source_span: (u64, u64),
    /// Whether the sequence begins with a BOS token inserted by the packer.
    /// Neither packing policy inserts one.
    pub bos_present: bool,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusFormat {
    JsonlTokens,
    RawText,
}

impl FromStr for CorpusFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jsonl_tokens" | "jsonl-tokens" | "jsonl" => Ok(Self::JsonlTokens),
            "raw_text" | "raw-text" | "raw" => Ok(Self::RawText),
            other => Err(Error::config(format!("unknown corpus format {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PackPolicy {
    #[default]
    ConcatAndChunk,
    PerDoc,
}

impl FromStr for PackPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat_and_chunk" | "concat-and-chunk" => Ok(Self::ConcatAndChunk),
            "per_doc" | "per-doc" => Ok(Self::PerDoc),
            other => Err(Error::config(format!("unknown packing policy {other:?}"))),
        }
    }
}

/// Packing settings shared by every length in a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Packing {
    pub policy: PackPolicy,
    pub separator_id: Option<TokenId>,
}

/// Each byte becomes its own token id.
pub fn byte_tokenize(text: &[u8]) -> Vec<TokenId> {
    text.iter().map(|&b| TokenId::from(b)).collect()
}

#[derive(Deserialize)]
struct Header {
    format: String,
    vocab_size: u32,
}

#[derive(Deserialize)]
struct Record {
    tokens: Vec<TokenId>,
}

enum Source {
    Jsonl {
        lines: std::io::Lines<BufReader<File>>,
        line_no: usize,
    },
    Blocks(std::vec::IntoIter<Vec<u8>>),
}

/// Documents of a corpus file, yielded in file order.
pub struct DocumentStream {
    source: Source,
    vocab_size: Option<u32>,
    next_id: u64,
}

impl DocumentStream {
    /// Declared vocabulary size; `None` for an empty `jsonl_tokens` file.
    pub fn vocab_size(&self) -> Option<u32> {
        self.vocab_size
    }

    fn next_jsonl(&mut self) -> Option<Result<Document>> {
        let Source::Jsonl { lines, line_no } = &mut self.source else {
            unreachable!()
        };
        loop {
            let line = match lines.next()? {
                Ok(l) => l,
                Err(e) => return Some(Err(Error::data(format!("line {}: {e}", *line_no + 1)))),
            };
            *line_no += 1;
            if line.trim().is_empty() {
                continue;
            }
            let record: Record = match serde_json::from_str(&line) {
                Ok(r) => r,
                Err(e) => {
                    return Some(Err(Error::data(format!(
                        "line {}: malformed document record: {e}",
                        line_no
                    ))))
                }
            };
            let doc_id = self.next_id;
            self.next_id += 1;
            return Some(make_document(doc_id, record.tokens, self.vocab_size));
        }
    }
}

fn make_document(doc_id: u64, tokens: Vec<TokenId>, vocab: Option<u32>) -> Result<Document> {
    if tokens.is_empty() {
        return Err(Error::data(format!("doc {doc_id}: document has no tokens")));
    }
    if let Some(v) = vocab {
        if let Some((pos, &t)) = tokens.iter().enumerate().find(|(_, &t)| t >= v) {
            return Err(Error::data(format!(
                "doc {doc_id} position {pos}: token id {t} >= vocab_size {v}"
            )));
        }
    }
    Ok(Document { doc_id, tokens })
}

impl Iterator for DocumentStream {
    type Item = Result<Document>;

    fn next(&mut self) -> Option<Self::Item> {
        match &mut self.source {
            Source::Jsonl { .. } => self.next_jsonl(),
            Source::Blocks(blocks) => {
                let block = blocks.next()?;
                let doc_id = self.next_id;
                self.next_id += 1;
                Some(make_document(
                    doc_id,
                    byte_tokenize(&block),
                    self.vocab_size,
                ))
            }
        }
    }
}

/// Open a corpus file as a stream of documents.
///
/// For `jsonl_tokens` the header line is read eagerly so that the vocabulary
/// size is known up front; record errors surface while iterating and name
/// their line number.
pub fn load_documents(path: &Path, format: CorpusFormat) -> Result<DocumentStream> {
    match format {
        CorpusFormat::JsonlTokens => {
            let file = File::open(path).map_err(|e| Error::io(path, e))?;
            let mut lines = BufReader::new(file).lines();
            let mut line_no = 0;
            let mut vocab_size = None;
            for line in lines.by_ref() {
                let line = line.map_err(|e| Error::io(path, e))?;
                line_no += 1;
                if line.trim().is_empty() {
                    continue;
                }
                let header: Header = serde_json::from_str(&line).map_err(|e| {
                    Error::data(format!("line {line_no}: malformed corpus header: {e}"))
                })?;
                if header.format != CORPUS_FORMAT_TAG {
                    return Err(Error::data(format!(
                        "line {line_no}: unsupported corpus format {:?}",
                        header.format
                    )));
                }
                vocab_size = Some(header.vocab_size);
                break;
            }
            Ok(DocumentStream {
                source: Source::Jsonl { lines, line_no },
                vocab_size,
                next_id: 0,
            })
        }
        CorpusFormat::RawText => {
            let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
            Ok(DocumentStream {
                source: Source::Blocks(split_blocks(&bytes).into_iter()),
                vocab_size: Some(BYTE_VOCAB_SIZE),
                next_id: 0,
            })
        }
    }
}

/// Split text into blank-line-delimited blocks. Lines inside a block keep
/// their `\n` separators; the block's trailing newline is dropped.
fn split_blocks(bytes: &[u8]) -> Vec<Vec<u8>> {
    let mut blocks = Vec::new();
    let mut current: Vec<u8> = Vec::new();
    for line in bytes.split(|&b| b == b'\n') {
        let line = line.strip_suffix(b"\r").unwrap_or(line);
        if line.iter().all(|b| b.is_ascii_whitespace()) {
            if !current.is_empty() {
                blocks.push(std::mem::take(&mut current));
            }
            continue;
        }
        if !current.is_empty() {
            current.push(b'\n');
        }
        current.extend_from_slice(line);
    }
    if !current.is_empty() {
        blocks.push(current);
    }
    blocks
}

/// A fully loaded corpus.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub vocab_size: u32,
    pub documents: Vec<Document>,
}

impl Corpus {
    pub fn load(path: &Path, format: CorpusFormat) -> Result<Self> {
        let stream = load_documents(path, format)?;
        let vocab_size = stream.vocab_size();
        let documents = stream.collect::<Result<Vec<_>>>()?;
        let vocab_size = vocab_size.ok_or_else(|| Error::data("corpus file is empty"))?;
        Ok(Self {
            vocab_size,
            documents,
        })
    }

    pub fn total_tokens(&self) -> usize {
        self.documents.iter().map(|d| d.tokens.len()).sum()
    }

    /// Pack after checking the separator against the declared vocabulary.
    pub fn pack(&self, seq_len: usize, packing: Packing) -> Result<Vec<TokenSequence>> {
        if let Some(sep) = packing.separator_id {
            if sep >= self.vocab_size {
                return Err(Error::config(format!(
                    "separator id {sep} >= vocab_size {}",
                    self.vocab_size
                )));
            }
        }
        pack_sequences(
            self.documents.iter().cloned(),
            seq_len,
            packing.policy,
            packing.separator_id,
        )
    }

    /// Write in `jsonl_tokens` format.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = std::io::BufWriter::new(file);
        let io = |e| Error::io(path, e);
        writeln!(
            out,
            "{}",
            serde_json::json!({"format": CORPUS_FORMAT_TAG, "vocab_size": self.vocab_size})
        )
        .map_err(io)?;
        for doc in &self.documents {
            writeln!(out, "{}", serde_json::json!({ "tokens": doc.tokens })).map_err(io)?;
        }
        out.flush().map_err(io)
    }
}

/// Cut documents into sequences of exactly `seq_len` tokens.
///
/// `ConcatAndChunk` joins all documents (with `separator_id` between
/// consecutive documents when given) and chunks the stream without overlap,
/// discarding the trailing partial chunk. `PerDoc` truncates each document to
/// `seq_len` and skips shorter ones.
pub fn pack_sequences(
    docs: impl IntoIterator<Item = Document>,
    seq_len: usize,
    policy: PackPolicy,
    separator_id: Option<TokenId>,
) -> Result<Vec<TokenSequence>> {
    if seq_len < 2 {
        return Err(Error::config(format!(
            "seq_len must be >= 2, got {seq_len}"
        )));
    }
    let mut out = Vec::new();
    match policy {
        PackPolicy::ConcatAndChunk => {
            // Owning document of every stream position; `None` for separators.
            let mut stream: Vec<TokenId> = Vec::new();
            let mut owner: Vec<Option<u64>> = Vec::new();
            for (i, doc) in docs.into_iter().enumerate() {
                if i > 0 {
                    if let Some(sep) = separator_id {
                        stream.push(sep);
                        owner.push(None);
                    }
                }
                owner.extend(std::iter::repeat_n(Some(doc.doc_id), doc.tokens.len()));
                stream.extend(doc.tokens);
            }
            for (seq_id, (chunk, owners)) in stream
                .chunks_exact(seq_len)
                .zip(owner.chunks_exact(seq_len))
                .enumerate()
            {
                let mut ids = owners.iter().flatten();
                let first = *ids.next().expect("chunk contains a document token");
                let last = ids.last().copied().unwrap_or(first);
                out.push(TokenSequence {
                    seq_id: seq_id as u64,
                    tokens: chunk.to_vec(),
                    source_span: (first, last),
                    bos_present: false,
                });
            }
        }
        PackPolicy::PerDoc => {
            for doc in docs {
                if doc.tokens.len() < seq_len {
                    continue;
                }
                out.push(TokenSequence {
                    seq_id: out.len() as u64,
                    tokens: doc.tokens[..seq_len].to_vec(),
                    source_span: (doc.doc_id, doc.doc_id),
                    bos_present: false,
                });
            }
        }
    }
    if out.is_empty() {
        return Err(Error::data(format!(
            "corpus too small for seq_len {seq_len}"
        )));
    }
    Ok(out)
}
