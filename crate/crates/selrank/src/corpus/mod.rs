//! Corpus ingestion: text normalization, vocabulary, embeddings, TREC
//! qrels/run files and the TSV formats for documents, anchors and queries.

mod embed;
mod trec;
mod tsv;

pub use embed::{load_embeddings, EmbeddingTable};
pub(crate) use embed::random_embedding;
pub use trec::{read_qrels, read_run, write_run, RelevanceJudgments};
pub use tsv::{load_anchor_pairs, load_corpus, load_queries, Corpus};

use std::collections::{HashMap, HashSet};

use crate::error::{Error, Result};

/// Reserved padding identifier; its embedding row stays zero.
pub const PAD: u32 = 0;
/// Reserved unknown-token identifier; its embedding row is trainable.
pub const UNK: u32 = 1;

/// Ordered vocabulary identifiers for one piece of text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSeq {
    pub tokens: Vec<u32>,
    pub source_id: String,
}

impl TokenSeq {
    pub fn new(tokens: Vec<u32>, source_id: impl Into<String>) -> Self {
        TokenSeq {
            tokens,
            source_id: source_id.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn truncated(mut self, cap: usize) -> Self {
        self.tokens.truncate(cap);
        self
    }
}

/// Token <-> identifier map with PAD and UNK reserved up front.
///
/// Real tokens are alphanumeric-only, so the angle-bracketed sentinels can
/// never be produced by tokenization.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    by_token: HashMap<String, u32>,
    tokens: Vec<String>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    pub fn new() -> Self {
        let tokens = vec!["<pad>".to_string(), "<unk>".to_string()];
        let by_token = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary { by_token, tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn add_or_get(&mut self, token: &str) -> u32 {
        if let Some(id) = self.by_token.get(token) {
            return *id;
        }
        let id = self.tokens.len() as u32;
        self.tokens.push(token.to_string());
        self.by_token.insert(token.to_string(), id);
        id
    }

    pub fn get(&self, token: &str) -> Option<u32> {
        self.by_token.get(token).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stemmer {
    None,
    /// Strips "-ing", "-ed", "-s" (minimum stem length 3) and undoubles a
    /// trailing doubled consonant left by the first two.
    SuffixStripper,
}

/// Text normalization settings.
#[derive(Debug, Clone)]
pub struct NormConfig {
    pub stopwords: HashSet<String>,
    pub stemmer: Stemmer,
    /// Token cap applied to queries and anchors at ingestion.
    pub query_len_cap: usize,
    /// Token cap applied to documents at ingestion.
    pub doc_len_cap: usize,
}

impl Default for NormConfig {
    fn default() -> Self {
        NormConfig {
            stopwords: default_stopwords(),
            stemmer: Stemmer::None,
            query_len_cap: 16,
            doc_len_cap: 256,
        }
    }
}

/// The short English stopword list shipped with the crate.
pub fn default_stopwords() -> HashSet<String> {
    include_str!("../../data/stopwords.txt")
        .lines()
        .map(|l| l.trim().to_string())
        .filter(|l| !l.is_empty())
        .collect()
}

/// Lowercase, split on non-alphanumeric runs, drop stopwords, stem.
pub fn normalize(text: &str, config: &NormConfig) -> Vec<String> {
    let lower = text.to_lowercase();
    lower
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .filter(|t| !config.stopwords.contains(*t))
        .map(|t| match config.stemmer {
            Stemmer::None => t.to_string(),
            Stemmer::SuffixStripper => strip_suffix(t),
        })
        .collect()
}

fn strip_suffix(token: &str) -> String {
    for suffix in ["ing", "ed", "s"] {
        if let Some(stem) = token.strip_suffix(suffix) {
            if stem.chars().count() >= 3 {
                if suffix == "s" {
                    return stem.to_string();
                }
                return undouble(stem);
            }
        }
    }
    token.to_string()
}

fn undouble(stem: &str) -> String {
    let chars: Vec<char> = stem.chars().collect();
    let n = chars.len();
    if n >= 2 && chars[n - 1] == chars[n - 2] && !matches!(chars[n - 1], 'l' | 's' | 'z') {
        chars[..n - 1].iter().collect()
    } else {
        stem.to_string()
    }
}

/// Normalize `text` and map it through a frozen vocabulary; tokens outside
/// the vocabulary become [`UNK`].
pub fn tokenize(text: &str, config: &NormConfig, vocab: &Vocabulary, source_id: &str) -> TokenSeq {
    let tokens = normalize(text, config)
        .iter()
        .map(|t| vocab.get(t).unwrap_or(UNK))
        .collect();
    TokenSeq::new(tokens, source_id)
}

/// Normalize `text` while growing the vocabulary (corpus ingestion).
pub fn tokenize_building(
    text: &str,
    config: &NormConfig,
    vocab: &mut Vocabulary,
    source_id: &str,
) -> TokenSeq {
    let tokens = normalize(text, config)
        .iter()
        .map(|t| vocab.add_or_get(t))
        .collect();
    TokenSeq::new(tokens, source_id)
}

/// One weak-supervision pair: an anchor text and the document it links to.
#[derive(Debug, Clone)]
pub struct AnchorDocPair {
    pub anchor: TokenSeq,
    pub linked_doc_id: String,
    pub pair_id: u64,
}

pub(crate) fn check_anchor(pair: &AnchorDocPair, known_docs: &HashSet<&str>) -> Result<()> {
    if pair.anchor.is_empty() {
        return Err(Error::Data(format!(
            "anchor {} is empty after normalization",
            pair.pair_id
        )));
    }
    if !known_docs.contains(pair.linked_doc_id.as_str()) {
        return Err(Error::Data(format!(
            "anchor {} links to unknown document {}",
            pair.pair_id, pair.linked_doc_id
        )));
    }
    Ok(())
}
