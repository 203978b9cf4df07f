use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::eval::RankedList;

/// Graded relevance judgments: query -> document -> grade.
///
/// Documents absent from a query's map count as grade 0.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RelevanceJudgments {
    map: BTreeMap<String, BTreeMap<String, u32>>,
}

impl RelevanceJudgments {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, qid: &str, docid: &str, grade: u32) -> Result<()> {
        let per_query = self.map.entry(qid.to_string()).or_default();
        if per_query.contains_key(docid) {
            return Err(Error::Data(format!(
                "duplicate judgment for ({}, {})",
                qid, docid
            )));
        }
        per_query.insert(docid.to_string(), grade);
        Ok(())
    }

    pub fn grade(&self, qid: &str, docid: &str) -> u32 {
        self.map
            .get(qid)
            .and_then(|m| m.get(docid))
            .copied()
            .unwrap_or(0)
    }

    pub fn has_query(&self, qid: &str) -> bool {
        self.map.contains_key(qid)
    }

    pub fn queries(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn judged_docs(&self, qid: &str) -> Option<&BTreeMap<String, u32>> {
        self.map.get(qid)
    }

    pub fn query_count(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn max_grade(&self) -> u32 {
        self.map
            .values()
            .flat_map(|m| m.values())
            .copied()
            .max()
            .unwrap_or(0)
    }

    /// Copy containing only the given queries. Training holds one of these
    /// so test-fold judgments are physically out of reach.
    pub fn restricted_to(&self, allowed: &HashSet<String>) -> Self {
        RelevanceJudgments {
            map: self
                .map
                .iter()
                .filter(|(q, _)| allowed.contains(*q))
                .map(|(q, m)| (q.clone(), m.clone()))
                .collect(),
        }
    }
}

/// Parse a TREC qrels file: `qid 0 docid grade` per line.
pub fn read_qrels(path: &Path) -> Result<RelevanceJudgments> {
    let display = path.display().to_string();
    let reader = BufReader::new(File::open(path)?);
    let mut out = RelevanceJudgments::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(Error::parse(
                &display,
                lineno + 1,
                format!("expected 4 fields, found {}", fields.len()),
            ));
        }
        let grade: u32 = fields[3].parse().map_err(|_| {
            Error::parse(
                &display,
                lineno + 1,
                format!("non-integer grade {:?}", fields[3]),
            )
        })?;
        out.insert(fields[0], fields[2], grade)
            .map_err(|e| Error::parse(&display, lineno + 1, e.to_string()))?;
    }
    Ok(out)
}

/// Write rankings in TREC run format: `qid Q0 docid rank score tag`.
/// Scores carry six decimal places.
pub fn write_run(path: &Path, lists: &[RankedList], tag: &str) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for list in lists {
        for (rank, (docid, score)) in list.entries().iter().enumerate() {
            writeln!(
                w,
                "{} Q0 {} {} {:.6} {}",
                list.query_id,
                docid,
                rank + 1,
                score,
                tag
            )?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Parse a TREC run file back into ranked lists (grouped by query in file
/// order, entries ordered by rank).
pub fn read_run(path: &Path) -> Result<Vec<RankedList>> {
    let display = path.display().to_string();
    let reader = BufReader::new(File::open(path)?);
    let mut order: Vec<String> = Vec::new();
    let mut per_query: BTreeMap<String, Vec<(usize, String, f64)>> = BTreeMap::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 6 {
            return Err(Error::parse(
                &display,
                lineno + 1,
                format!("expected 6 fields, found {}", fields.len()),
            ));
        }
        let rank: usize = fields[3]
            .parse()
            .map_err(|_| Error::parse(&display, lineno + 1, "bad rank"))?;
        let score: f64 = fields[4]
            .parse()
            .map_err(|_| Error::parse(&display, lineno + 1, "bad score"))?;
        if !per_query.contains_key(fields[0]) {
            order.push(fields[0].to_string());
        }
        per_query
            .entry(fields[0].to_string())
            .or_default()
            .push((rank, fields[2].to_string(), score));
    }
    let mut lists = Vec::new();
    for qid in order {
        let mut rows = per_query.remove(&qid).unwrap();
        rows.sort_by_key(|(rank, _, _)| *rank);
        let entries: Vec<(String, f64)> = rows.into_iter().map(|(_, d, s)| (d, s)).collect();
        lists.push(RankedList::from_sorted(&qid, entries)?);
    }
    Ok(lists)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_line_qrels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("qrels.txt");
        writeln!(File::create(&path).unwrap(), "q1 0 d7 2").unwrap();
        let qrels = read_qrels(&path).unwrap();
        assert_eq!(qrels.grade("q1", "d7"), 2);
        assert_eq!(qrels.grade("q1", "other"), 0);
    }

    #[test]
    fn empty_file_empty_judgments() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("qrels.txt");
        File::create(&path).unwrap();
        assert!(read_qrels(&path).unwrap().is_empty());
    }

    #[test]
    fn duplicate_judgment_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("qrels.txt");
        let mut f = File::create(&path).unwrap();
        writeln!(f, "q1 0 d1 1").unwrap();
        writeln!(f, "q1 0 d1 2").unwrap();
        assert!(read_qrels(&path).is_err());
    }

    #[test]
    fn non_integer_grade_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("qrels.txt");
        writeln!(File::create(&path).unwrap(), "q1 0 d1 high").unwrap();
        assert!(read_qrels(&path).is_err());
    }

    proptest! {
        // Write-then-read equality over random runs with 6-significant-digit
        // scores assigned in descending order.
        #[test]
        fn run_round_trip(seed in 0u64..500) {
            use rand::Rng;
            let mut rng = crate::rngutil::stream(seed, "run-prop");
            let n_queries = rng.gen_range(1..6);
            let mut lists = Vec::new();
            for q in 0..n_queries {
                let n_docs = rng.gen_range(1..40);
                let mut entries = Vec::new();
                let mut score = 100.0;
                for d in 0..n_docs {
                    score -= rng.gen_range(0.000001..1.0f64);
                    // quantize to the 6 decimals the writer emits
                    let s = (score * 1e6).round() / 1e6;
                    entries.push((format!("d{}", d), s));
                }
                lists.push(RankedList::from_sorted(&format!("q{}", q), entries).unwrap());
            }
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("run.txt");
            write_run(&path, &lists, "prop").unwrap();
            let back = read_run(&path).unwrap();
            prop_assert_eq!(lists.len(), back.len());
            for (a, b) in lists.iter().zip(&back) {
                prop_assert_eq!(&a.query_id, &b.query_id);
                prop_assert_eq!(a.entries(), b.entries());
            }
        }
    }

    #[test]
    fn run_lines_have_contiguous_ranks_and_sorted_scores() {
        let lists = vec![
            RankedList::from_scores("qa", vec![("d2".into(), 0.5), ("d1".into(), 0.9)]).unwrap(),
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.txt");
        write_run(&path, &lists, "t").unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[0].starts_with("qa Q0 d1 1 0.9"));
        assert!(lines[1].starts_with("qa Q0 d2 2 0.5"));
    }
}
