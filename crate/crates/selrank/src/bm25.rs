//! Inverted index with Okapi BM25 scoring. Serves as the base retrieval
//! model, the candidate-pool builder and the pseudo-negative sampler.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;

use crate::corpus::{AnchorDocPair, Corpus, TokenSeq};
use crate::error::{Error, Result};

/// BM25 constants; the idf uses the `ln(x + 1)` floor so it stays
/// non-negative.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params { k1: 1.2, b: 0.75 }
    }
}

impl Bm25Params {
    fn validate(&self) -> Result<()> {
        if self.k1 <= 0.0 || !(0.0..=1.0).contains(&self.b) {
            return Err(Error::Config(format!(
                "bm25 needs k1 > 0 and 0 <= b <= 1, got k1={} b={}",
                self.k1, self.b
            )));
        }
        Ok(())
    }
}

/// Term -> postings inverted index. Documents are numbered in ascending
/// doc-id order, so postings sorted by document number are also sorted by
/// doc id.
#[derive(Debug, Clone, PartialEq)]
pub struct InvertedIndex {
    doc_ids: Vec<String>,
    doc_lengths: Vec<u32>,
    index_of: HashMap<String, usize>,
    postings: BTreeMap<u32, Vec<(u32, u32)>>,
    avg_len: f64,
}

impl InvertedIndex {
    pub fn build(docs: &[(String, TokenSeq)]) -> Result<Self> {
        let mut order: Vec<usize> = (0..docs.len()).collect();
        order.sort_by(|a, b| docs[*a].0.cmp(&docs[*b].0));
        let mut doc_ids = Vec::with_capacity(docs.len());
        let mut doc_lengths = Vec::with_capacity(docs.len());
        let mut index_of = HashMap::with_capacity(docs.len());
        let mut postings: BTreeMap<u32, Vec<(u32, u32)>> = BTreeMap::new();
        for src in order {
            let (doc_id, seq) = &docs[src];
            if index_of.contains_key(doc_id) {
                return Err(Error::Data(format!("duplicate doc_id {}", doc_id)));
            }
            let num = doc_ids.len() as u32;
            index_of.insert(doc_id.clone(), num as usize);
            doc_ids.push(doc_id.clone());
            doc_lengths.push(seq.len() as u32);
            let mut counts: BTreeMap<u32, u32> = BTreeMap::new();
            for t in &seq.tokens {
                *counts.entry(*t).or_insert(0) += 1;
            }
            for (term, tf) in counts {
                postings.entry(term).or_default().push((num, tf));
            }
        }
        let total: u64 = doc_lengths.iter().map(|l| u64::from(*l)).sum();
        let avg_len = if doc_ids.is_empty() {
            0.0
        } else {
            total as f64 / doc_ids.len() as f64
        };
        Ok(InvertedIndex {
            doc_ids,
            doc_lengths,
            index_of,
            postings,
            avg_len,
        })
    }

    pub fn from_corpus(corpus: &Corpus) -> Result<Self> {
        let docs: Vec<(String, TokenSeq)> = corpus
            .doc_ids
            .iter()
            .cloned()
            .zip(corpus.docs.iter().cloned())
            .collect();
        Self::build(&docs)
    }

    pub fn doc_count(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn avg_doc_len(&self) -> f64 {
        self.avg_len
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    /// Postings of one term as (doc_id, tf), in ascending doc-id order.
    pub fn postings(&self, term: u32) -> Vec<(&str, u32)> {
        self.postings
            .get(&term)
            .map(|p| {
                p.iter()
                    .map(|(num, tf)| (self.doc_ids[*num as usize].as_str(), *tf))
                    .collect()
            })
            .unwrap_or_default()
    }

    fn idf(&self, term: u32) -> f64 {
        let df = self.postings.get(&term).map_or(0, |p| p.len()) as f64;
        let n = self.doc_count() as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }

    fn tf_in(&self, term: u32, doc_num: u32) -> u32 {
        self.postings
            .get(&term)
            .and_then(|p| {
                p.binary_search_by_key(&doc_num, |(num, _)| *num)
                    .ok()
                    .map(|i| p[i].1)
            })
            .unwrap_or(0)
    }

    /// BM25 score of a document for a query; duplicate query terms count
    /// once per occurrence.
    pub fn score(&self, q: &TokenSeq, doc_id: &str, params: &Bm25Params) -> Result<f64> {
        params.validate()?;
        let num = *self
            .index_of
            .get(doc_id)
            .ok_or_else(|| Error::Data(format!("unknown doc_id {}", doc_id)))? as u32;
        let len = f64::from(self.doc_lengths[num as usize]);
        let norm =
            params.k1 * (1.0 - params.b + params.b * len / self.avg_len.max(f64::MIN_POSITIVE));
        let mut score = 0.0;
        for term in &q.tokens {
            let tf = f64::from(self.tf_in(*term, num));
            if tf == 0.0 {
                continue;
            }
            score += self.idf(*term) * tf * (params.k1 + 1.0) / (tf + norm);
        }
        Ok(score)
    }

    /// Top-k documents matching at least one query term, ordered by
    /// descending score with ties broken by ascending doc id.
    pub fn retrieve_topk(
        &self,
        q: &TokenSeq,
        k: usize,
        params: &Bm25Params,
    ) -> Result<Vec<(String, f64)>> {
        params.validate()?;
        if k == 0 {
            return Err(Error::Config("retrieve_topk needs k >= 1".into()));
        }
        let mut acc: HashMap<u32, f64> = HashMap::new();
        for term in &q.tokens {
            let Some(posts) = self.postings.get(term) else {
                continue;
            };
            let idf = self.idf(*term);
            for (num, tf) in posts {
                let len = f64::from(self.doc_lengths[*num as usize]);
                let norm = params.k1
                    * (1.0 - params.b + params.b * len / self.avg_len.max(f64::MIN_POSITIVE));
                let tf = f64::from(*tf);
                *acc.entry(*num).or_insert(0.0) += idf * tf * (params.k1 + 1.0) / (tf + norm);
            }
        }
        let mut scored: Vec<(u32, f64)> = acc.into_iter().collect();
        // doc numbers ascend with doc ids, so the tie-break is lexicographic
        scored.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .expect("finite")
                .then_with(|| a.0.cmp(&b.0))
        });
        scored.truncate(k);
        Ok(scored
            .into_iter()
            .map(|(num, s)| (self.doc_ids[num as usize].clone(), s))
            .collect())
    }

    /// Pseudo-negatives for an anchor: the top BM25 candidates minus the
    /// linked document, padded with seeded uniform draws when retrieval
    /// comes up short.
    pub fn sample_negatives(
        &self,
        pair: &AnchorDocPair,
        n: usize,
        params: &Bm25Params,
        rng: &mut impl Rng,
    ) -> Result<Vec<String>> {
        if n == 0 {
            return Err(Error::Config("sample_negatives needs n >= 1".into()));
        }
        if self.doc_count() < n + 1 {
            return Err(Error::Data(format!(
                "corpus of {} docs cannot supply {} negatives plus the linked doc",
                self.doc_count(),
                n
            )));
        }
        let mut negatives: Vec<String> = self
            .retrieve_topk(&pair.anchor, n + 1, params)?
            .into_iter()
            .map(|(d, _)| d)
            .filter(|d| *d != pair.linked_doc_id)
            .take(n)
            .collect();
        while negatives.len() < n {
            let cand = &self.doc_ids[rng.gen_range(0..self.doc_count())];
            if *cand != pair.linked_doc_id && !negatives.contains(cand) {
                negatives.push(cand.clone());
            }
        }
        Ok(negatives)
    }

    /// Binary snapshot: magic, version, then documents and postings.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(b"SRIX")?;
        w.write_all(&1u32.to_le_bytes())?;
        w.write_all(&(self.doc_ids.len() as u64).to_le_bytes())?;
        for (id, len) in self.doc_ids.iter().zip(&self.doc_lengths) {
            let bytes = id.as_bytes();
            w.write_all(&(bytes.len() as u32).to_le_bytes())?;
            w.write_all(bytes)?;
            w.write_all(&len.to_le_bytes())?;
        }
        w.write_all(&(self.postings.len() as u64).to_le_bytes())?;
        for (term, posts) in &self.postings {
            w.write_all(&term.to_le_bytes())?;
            w.write_all(&(posts.len() as u64).to_le_bytes())?;
            for (num, tf) in posts {
                w.write_all(&num.to_le_bytes())?;
                w.write_all(&tf.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"SRIX" {
            return Err(Error::Data("not an index snapshot".into()));
        }
        let version = read_u32(&mut r)?;
        if version != 1 {
            return Err(Error::Data(format!(
                "unsupported index version {}",
                version
            )));
        }
        let n_docs = read_u64(&mut r)? as usize;
        let mut doc_ids = Vec::with_capacity(n_docs);
        let mut doc_lengths = Vec::with_capacity(n_docs);
        let mut index_of = HashMap::with_capacity(n_docs);
        for i in 0..n_docs {
            let len = read_u32(&mut r)? as usize;
            let mut buf = vec![0u8; len];
            r.read_exact(&mut buf)?;
            let id = String::from_utf8(buf).map_err(|_| Error::Data("bad doc id".into()))?;
            index_of.insert(id.clone(), i);
            doc_ids.push(id);
            doc_lengths.push(read_u32(&mut r)?);
        }
        let n_terms = read_u64(&mut r)? as usize;
        let mut postings = BTreeMap::new();
        for _ in 0..n_terms {
            let term = read_u32(&mut r)?;
            let n_posts = read_u64(&mut r)? as usize;
            let mut posts = Vec::with_capacity(n_posts);
            for _ in 0..n_posts {
                let num = read_u32(&mut r)?;
                let tf = read_u32(&mut r)?;
                posts.push((num, tf));
            }
            postings.insert(term, posts);
        }
        let total: u64 = doc_lengths.iter().map(|l| u64::from(*l)).sum();
        let avg_len = if doc_ids.is_empty() {
            0.0
        } else {
            total as f64 / doc_ids.len() as f64
        };
        Ok(InvertedIndex {
            doc_ids,
            doc_lengths,
            index_of,
            postings,
            avg_len,
        })
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
