use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use crate::error::{Error, Result};

use super::{check_anchor, tokenize, tokenize_building, AnchorDocPair, NormConfig, TokenSeq, Vocabulary};

/// Tokenized document collection plus the vocabulary built from it.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub doc_ids: Vec<String>,
    pub docs: Vec<TokenSeq>,
    index_of: HashMap<String, usize>,
    pub vocab: Vocabulary,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn doc(&self, doc_id: &str) -> Option<&TokenSeq> {
        self.index_of.get(doc_id).map(|i| &self.docs[*i])
    }

    pub fn doc_id_set(&self) -> HashSet<&str> {
        self.doc_ids.iter().map(|s| s.as_str()).collect()
    }
}

fn tsv_lines(path: &Path) -> Result<Vec<(usize, String, String)>> {
    let display = path.display().to_string();
    let reader = BufReader::new(File::open(path)?);
    let mut rows = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let (a, b) = line.split_once('\t').ok_or_else(|| {
            Error::parse(&display, lineno + 1, "expected two tab-separated fields")
        })?;
        rows.push((lineno + 1, a.to_string(), b.to_string()));
    }
    Ok(rows)
}

/// Load a document TSV ("doc_id \t text"), building the vocabulary in read
/// order. Documents are truncated at the configured cap.
pub fn load_corpus(path: &Path, config: &NormConfig) -> Result<Corpus> {
    let display = path.display().to_string();
    let mut vocab = Vocabulary::new();
    let mut doc_ids = Vec::new();
    let mut docs = Vec::new();
    let mut index_of = HashMap::new();
    for (lineno, doc_id, text) in tsv_lines(path)? {
        if index_of.contains_key(&doc_id) {
            return Err(Error::parse(
                &display,
                lineno,
                format!("duplicate doc_id {}", doc_id),
            ));
        }
        let seq = tokenize_building(&text, config, &mut vocab, &doc_id)
            .truncated(config.doc_len_cap);
        index_of.insert(doc_id.clone(), docs.len());
        doc_ids.push(doc_id);
        docs.push(seq);
    }
    Ok(Corpus {
        doc_ids,
        docs,
        index_of,
        vocab,
    })
}

/// Load an anchor TSV ("anchor_text \t linked_doc_id") against a frozen
/// vocabulary. Pair ids follow read order.
pub fn load_anchor_pairs(
    path: &Path,
    config: &NormConfig,
    corpus: &Corpus,
) -> Result<Vec<AnchorDocPair>> {
    let known = corpus.doc_id_set();
    let mut pairs = Vec::new();
    for (i, (_, text, doc_id)) in tsv_lines(path)?.into_iter().enumerate() {
        let pair = AnchorDocPair {
            anchor: tokenize(&text, config, &corpus.vocab, &format!("a{}", i))
                .truncated(config.query_len_cap),
            linked_doc_id: doc_id,
            pair_id: i as u64,
        };
        check_anchor(&pair, &known)?;
        pairs.push(pair);
    }
    Ok(pairs)
}

/// Load a query TSV ("query_id \t text") against a frozen vocabulary.
pub fn load_queries(
    path: &Path,
    config: &NormConfig,
    vocab: &Vocabulary,
) -> Result<Vec<(String, TokenSeq)>> {
    let mut out = Vec::new();
    for (_, qid, text) in tsv_lines(path)? {
        let seq = tokenize(&text, config, vocab, &qid).truncated(config.query_len_cap);
        out.push((qid, seq));
    }
    Ok(out)
}
