#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;

use lenbench::corpus::Corpus;
use lenbench::markov::MarkovModel;

pub fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data")
}

pub fn corpus_path() -> PathBuf {
    data_dir().join("tiny_corpus.jsonl")
}

pub fn model_path() -> PathBuf {
    data_dir().join("markov_k2.json")
}

pub fn tiny_corpus() -> Corpus {
    Corpus::load(&corpus_path(), "jsonl-tokens".parse().unwrap()).expect("bundled corpus loads")
}

pub fn markov_k2() -> Arc<MarkovModel> {
    Arc::new(MarkovModel::load(&model_path()).expect("bundled model loads"))
}
