//! Regenerates the bundled fixtures in `data/`:
//!
//! - `tiny_corpus.jsonl`: synthetic documents over 64 token ids drawn from a
//!   noisy second-order rule.
//! - `markov_k2.json`: an order-2 model (lambda 0.1) fitted on that corpus.
//!
//! Run with `cargo run --example build_fixtures`.

use std::path::Path;

use lenbench::corpus::{Corpus, Document};
use lenbench::markov::MarkovModel;
use lenbench::rng::SplitMix64;

const VOCAB: u32 = 64;
const TOKENS: usize = 16_000;
const SEED: u64 = 20_240_601;

fn document(rng: &mut SplitMix64, doc_id: u64, len: usize) -> Document {
    // each document has a "topic" that shifts the rule's offset
    let topic = rng.below(8) as u32;
    let mut tokens = vec![
        rng.below(VOCAB as u64) as u32,
        rng.below(VOCAB as u64) as u32,
    ];
    while tokens.len() < len {
        let (a, b) = (tokens[tokens.len() - 2], tokens[tokens.len() - 1]);
        let u = rng.next_f64();
        let next = if u < 0.55 {
            (3 * b + a + topic) % VOCAB
        } else if u < 0.75 {
            (b + 1) % VOCAB
        } else if u < 0.85 {
            (topic * 8 + rng.below(8) as u32) % VOCAB
        } else {
            rng.below(VOCAB as u64) as u32
        };
        tokens.push(next);
    }
    Document { doc_id, tokens }
}

fn main() -> lenbench::Result<()> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("data");
    std::fs::create_dir_all(&dir).map_err(|e| lenbench::Error::io(&dir, e))?;
    let mut rng = SplitMix64::new(SEED);
    let mut documents = Vec::new();
    let mut total = 0;
    while total < TOKENS {
        let len = (100 + rng.below(501) as usize).min(TOKENS - total).max(2);
        documents.push(document(&mut rng, documents.len() as u64, len));
        total += len;
    }
    let corpus = Corpus {
        vocab_size: VOCAB,
        documents,
    };
    let corpus_path = dir.join("tiny_corpus.jsonl");
    corpus.write_jsonl(&corpus_path)?;
    let model = MarkovModel::fit(corpus.documents.iter().cloned(), 2, VOCAB, 0.1)?;
    model.save(&dir.join("markov_k2.json"))?;
    println!(
        "{} documents, {} tokens, {} contexts",
        corpus.documents.len(),
        corpus.total_tokens(),
        model.n_contexts()
    );
    Ok(())
}
