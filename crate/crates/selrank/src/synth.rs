//! Synthetic topical corpus generator: documents with topic-specific
//! vocabulary, graded queries, and anchor texts whose linked document is
//! on-topic except for a configurable noise fraction.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::error::{Error, Result};
use crate::rngutil;

#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub topics: usize,
    pub docs_per_topic: usize,
    pub vocab_size: usize,
    pub anchors: usize,
    /// Fraction of anchors linked to a uniformly random off-topic document.
    pub noise_rate: f64,
    pub queries: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            topics: 5,
            docs_per_topic: 400,
            vocab_size: 600,
            anchors: 200,
            noise_rate: 0.4,
            queries: 50,
            seed: 1,
        }
    }
}

/// Files written by [`generate_synth`].
#[derive(Debug, Clone)]
pub struct SynthPaths {
    pub docs: PathBuf,
    pub anchors: PathBuf,
    pub qrels: PathBuf,
    pub queries: PathBuf,
}

// words per topic below which queries, anchors and docs collide too much
const MIN_TOPIC_WORDS: usize = 12;
const SHARED_FRACTION: f64 = 0.2;
const DOC_LEN_RANGE: (usize, usize) = (30, 60);
// per-document fraction of topic tokens; the rest are shared background
const PURITY_RANGE: (f64, f64) = (0.2, 1.0);
// purity bands for grades 1..3; below the first band a doc stays unjudged
const GRADE_BANDS: [f64; 3] = [0.45, 0.6, 0.8];

struct TopicModel {
    shared: Vec<String>,
    topic_words: Vec<Vec<String>>,
}

fn build_topics(spec: &SynthSpec) -> Result<TopicModel> {
    if spec.topics == 0 || spec.docs_per_topic == 0 || spec.anchors == 0 || spec.queries == 0 {
        return Err(Error::Config("synthetic counts must be >= 1".into()));
    }
    if !(0.0..=1.0).contains(&spec.noise_rate) {
        return Err(Error::Config(format!(
            "noise rate must lie in [0, 1], got {}",
            spec.noise_rate
        )));
    }
    let shared_count = (spec.vocab_size as f64 * SHARED_FRACTION) as usize;
    let per_topic = (spec.vocab_size - shared_count) / spec.topics;
    if per_topic < MIN_TOPIC_WORDS {
        return Err(Error::Config(format!(
            "vocab of {} words is too small for {} topics",
            spec.vocab_size, spec.topics
        )));
    }
    let word = |i: usize| format!("w{:05}", i);
    let shared: Vec<String> = (0..shared_count).map(word).collect();
    let topic_words: Vec<Vec<String>> = (0..spec.topics)
        .map(|t| {
            (0..per_topic)
                .map(|i| word(shared_count + t * per_topic + i))
                .collect()
        })
        .collect();
    Ok(TopicModel {
        shared,
        topic_words,
    })
}

/// Generate the corpus, anchors, qrels and queries files under `out_dir`.
/// Output is byte-identical for equal specs.
pub fn generate_synth(spec: &SynthSpec, out_dir: &Path) -> Result<SynthPaths> {
    let model = build_topics(spec)?;
    std::fs::create_dir_all(out_dir)?;
    let paths = SynthPaths {
        docs: out_dir.join("docs.tsv"),
        anchors: out_dir.join("anchors.tsv"),
        qrels: out_dir.join("qrels.txt"),
        queries: out_dir.join("queries.tsv"),
    };

    // documents: each draws a topic purity (its fraction of topic tokens,
    // the rest shared background words); purity doubles as the latent
    // relevance grade, which term-level BM25 only weakly tracks
    let mut rng = rngutil::stream(spec.seed, "synth-docs");
    let n_docs = spec.topics * spec.docs_per_topic;
    let mut doc_topic = Vec::with_capacity(n_docs);
    let mut doc_grade = Vec::with_capacity(n_docs);
    let mut doc_words: Vec<Vec<&str>> = Vec::with_capacity(n_docs);
    {
        let mut w = BufWriter::new(File::create(&paths.docs)?);
        for t in 0..spec.topics {
            for i in 0..spec.docs_per_topic {
                let doc_idx = t * spec.docs_per_topic + i;
                let purity = rng.gen_range(PURITY_RANGE.0..PURITY_RANGE.1);
                let len = rng.gen_range(DOC_LEN_RANGE.0..=DOC_LEN_RANGE.1);
                let mut words = Vec::with_capacity(len);
                for _ in 0..len {
                    if rng.gen::<f64>() < purity {
                        words.push(
                            model.topic_words[t][rng.gen_range(0..model.topic_words[t].len())]
                                .as_str(),
                        );
                    } else {
                        words.push(model.shared[rng.gen_range(0..model.shared.len())].as_str());
                    }
                }
                let grade = GRADE_BANDS.iter().filter(|b| purity >= **b).count() as u32;
                writeln!(w, "d{:05}\t{}", doc_idx, words.join(" "))?;
                doc_topic.push(t);
                doc_grade.push(grade);
                doc_words.push(words);
            }
        }
        w.flush()?;
    }

    // queries: 2..4 distinct words from the round-robin topic; every
    // on-topic doc in a positive purity band is judged at that grade
    let mut rng = rngutil::stream(spec.seed, "synth-queries");
    let mut qw = BufWriter::new(File::create(&paths.queries)?);
    let mut rw = BufWriter::new(File::create(&paths.qrels)?);
    for q in 0..spec.queries {
        let t = q % spec.topics;
        let words = &model.topic_words[t];
        let n_terms = rng.gen_range(2..=4usize);
        let mut set = BTreeSet::new();
        while set.len() < n_terms {
            set.insert(words[rng.gen_range(0..words.len())].as_str());
        }
        let terms: Vec<&str> = set.into_iter().collect();
        writeln!(qw, "q{:03}\t{}", q, terms.join(" "))?;
        for i in 0..spec.docs_per_topic {
            let doc_idx = t * spec.docs_per_topic + i;
            if doc_grade[doc_idx] > 0 {
                writeln!(rw, "q{:03} 0 d{:05} {}", q, doc_idx, doc_grade[doc_idx])?;
            }
        }
    }
    qw.flush()?;
    rw.flush()?;

    // anchors: short topic phrases; the linked doc is a high-grade
    // same-topic doc, or an off-topic draw for noise
    let mut rng = rngutil::stream(spec.seed, "synth-anchors");
    let mut aw = BufWriter::new(File::create(&paths.anchors)?);
    for a in 0..spec.anchors {
        let t = a % spec.topics;
        let words = &model.topic_words[t];
        let n_terms = rng.gen_range(2..=3usize);
        let mut set = BTreeSet::new();
        while set.len() < n_terms {
            set.insert(words[rng.gen_range(0..words.len())].as_str());
        }
        let terms: Vec<&str> = set.into_iter().collect();
        let noisy = rng.gen::<f64>() < spec.noise_rate;
        let linked = if noisy && spec.topics > 1 {
            loop {
                let idx = rng.gen_range(0..n_docs);
                if doc_topic[idx] != t {
                    break idx;
                }
            }
        } else {
            // a random top-band same-topic doc, so clean anchor pairs
            // follow the same (topical text, relevant doc) shape as real
            // query-document pairs
            let mut best = t * spec.docs_per_topic;
            let mut best_grade = 0u32;
            for _ in 0..30 {
                let idx = t * spec.docs_per_topic + rng.gen_range(0..spec.docs_per_topic);
                if doc_grade[idx] == 3 {
                    best = idx;
                    best_grade = 3;
                    break;
                }
                if doc_grade[idx] > best_grade {
                    best = idx;
                    best_grade = doc_grade[idx];
                }
            }
            best
        };
        writeln!(aw, "{}\td{:05}", terms.join(" "), linked)?;
    }
    aw.flush()?;
    Ok(paths)
}

/// Topic of each generated document, in doc-id order (test support).
pub fn doc_topics(spec: &SynthSpec) -> Vec<usize> {
    (0..spec.topics * spec.docs_per_topic)
        .map(|i| i / spec.docs_per_topic)
        .collect()
}
