//! Ranking metrics, cross-validation folds, the paired randomization test
//! and coordinate-ascent feature fusion.

mod fusion;

pub use fusion::{coordinate_ascent, FeatureTable, FusionModel};

use rand::Rng;

use crate::corpus::RelevanceJudgments;
use crate::error::{Error, Result};

/// A query's documents ordered by descending score, ties broken by
/// ascending doc id.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub query_id: String,
    entries: Vec<(String, f64)>,
}

impl RankedList {
    /// Sort scored documents into a ranked list.
    pub fn from_scores(query_id: &str, mut entries: Vec<(String, f64)>) -> Result<Self> {
        if entries.iter().any(|(_, s)| !s.is_finite()) {
            return Err(Error::NonFinite(format!("scores for query {}", query_id)));
        }
        entries.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .expect("finite scores")
                .then_with(|| a.0.cmp(&b.0))
        });
        Self::from_sorted(query_id, entries)
    }

    /// Accept an already-ordered list, validating the ordering invariants.
    pub fn from_sorted(query_id: &str, entries: Vec<(String, f64)>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for w in entries.windows(2) {
            if w[1].1 > w[0].1 {
                return Err(Error::Data(format!(
                    "scores increase within query {}",
                    query_id
                )));
            }
        }
        for (d, _) in &entries {
            if !seen.insert(d.as_str()) {
                return Err(Error::Data(format!(
                    "duplicate doc {} in query {}",
                    d, query_id
                )));
            }
        }
        Ok(RankedList {
            query_id: query_id.to_string(),
            entries,
        })
    }

    pub fn entries(&self) -> &[(String, f64)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn gain(grade: u32) -> f64 {
    2f64.powi(grade as i32) - 1.0
}

fn discount(rank: usize) -> f64 {
    ((rank + 1) as f64).log2()
}

/// NDCG@k with `2^grade - 1` gains and `log2(rank + 1)` discounts.
/// A query whose judged grades are all zero scores 0 by convention.
pub fn ndcg_at_k(rl: &RankedList, qrels: &RelevanceJudgments, k: usize) -> Result<f64> {
    let judged = qrels
        .judged_docs(&rl.query_id)
        .ok_or_else(|| Error::Data(format!("query {} has no judgments", rl.query_id)))?;
    let mut ideal: Vec<u32> = judged.values().copied().collect();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg: f64 = ideal
        .iter()
        .take(k)
        .enumerate()
        .map(|(r, g)| gain(*g) / discount(r + 1))
        .sum();
    if idcg == 0.0 {
        return Ok(0.0);
    }
    let dcg: f64 = rl
        .entries
        .iter()
        .take(k)
        .enumerate()
        .map(|(r, (d, _))| gain(qrels.grade(&rl.query_id, d)) / discount(r + 1))
        .sum();
    Ok(dcg / idcg)
}

/// ERR@k with stop probabilities `(2^grade - 1) / 2^(max_grade + 1)`, the
/// graded scale convention used by the TREC web-track evaluator.
pub fn err_at_k(
    rl: &RankedList,
    qrels: &RelevanceJudgments,
    k: usize,
    max_grade: u32,
) -> Result<f64> {
    let judged = qrels
        .judged_docs(&rl.query_id)
        .ok_or_else(|| Error::Data(format!("query {} has no judgments", rl.query_id)))?;
    if judged.values().any(|g| *g > max_grade) {
        return Err(Error::Data(format!(
            "query {} has grades above max_grade {}",
            rl.query_id, max_grade
        )));
    }
    let denom = 2f64.powi(max_grade as i32 + 1);
    let mut err = 0.0;
    let mut continue_prob = 1.0;
    for (r, (d, _)) in rl.entries.iter().take(k).enumerate() {
        let stop = gain(qrels.grade(&rl.query_id, d)) / denom;
        err += continue_prob * stop / (r + 1) as f64;
        continue_prob *= 1.0 - stop;
    }
    Ok(err)
}

/// Mean of a per-query metric over ranked lists, in list order.
pub fn mean_metric(
    lists: &[RankedList],
    qrels: &RelevanceJudgments,
    metric: impl Fn(&RankedList, &RelevanceJudgments) -> Result<f64>,
) -> Result<f64> {
    if lists.is_empty() {
        return Err(Error::Data("no queries to evaluate".into()));
    }
    let mut sum = 0.0;
    for rl in lists {
        sum += metric(rl, qrels)?;
    }
    Ok(sum / lists.len() as f64)
}

/// Two-sided paired randomization test on per-query metric differences.
///
/// Each resample flips each pair's sign with probability one half;
/// `p = (1 + #{|stat*| >= |stat|}) / (1 + resamples)`.
pub fn permutation_test(
    per_query_a: &[f64],
    per_query_b: &[f64],
    resamples: usize,
    rng: &mut impl Rng,
) -> Result<f64> {
    if per_query_a.len() != per_query_b.len() {
        return Err(Error::Data(format!(
            "paired test needs equal lengths, got {} vs {}",
            per_query_a.len(),
            per_query_b.len()
        )));
    }
    if per_query_a.len() < 2 {
        return Err(Error::Data("paired test needs at least 2 queries".into()));
    }
    let diffs: Vec<f64> = per_query_a
        .iter()
        .zip(per_query_b)
        .map(|(a, b)| a - b)
        .collect();
    let n = diffs.len() as f64;
    let observed = (diffs.iter().sum::<f64>() / n).abs();
    let mut at_least = 0usize;
    for _ in 0..resamples {
        let mut s = 0.0;
        for d in &diffs {
            if rng.gen::<bool>() {
                s += d;
            } else {
                s -= d;
            }
        }
        if (s / n).abs() >= observed {
            at_least += 1;
        }
    }
    Ok((1 + at_least) as f64 / (1 + resamples) as f64)
}

/// Seeded shuffle then round-robin fold assignment; returns the fold index
/// of each input query. Fold sizes differ by at most one.
pub fn kfold_split(query_ids: &[String], folds: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..query_ids.len()).collect();
    let mut rng = crate::rngutil::stream(seed, "kfold");
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let mut assignment = vec![0usize; query_ids.len()];
    for (pos, idx) in order.into_iter().enumerate() {
        assignment[idx] = pos % folds.max(1);
    }
    assignment
}
