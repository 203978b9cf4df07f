//! Coordinate-ascent fitting of a linear combination of ranking features,
//! maximizing mean NDCG@k by cyclic single-weight line search.

use rand::Rng;

use crate::corpus::RelevanceJudgments;
use crate::error::{Error, Result};

/// Multiplicative line-search grid around the current weight; the 1.0 and
/// 2.0 entries produce the zero and sign-flip candidates.
const GRID: [f64; 7] = [0.05, 0.1, 0.2, 0.5, 1.0, 2.0, 5.0];
const MAX_SWEEPS: usize = 25;

/// Per-(query, document) feature rows for fusion fitting.
#[derive(Debug, Clone, Default)]
pub struct FeatureTable {
    pub feature_count: usize,
    rows: Vec<(String, String, Vec<f64>)>,
}

impl FeatureTable {
    pub fn new(feature_count: usize) -> Self {
        FeatureTable {
            feature_count,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, query_id: &str, doc_id: &str, features: Vec<f64>) -> Result<()> {
        if features.len() != self.feature_count {
            return Err(Error::Shape(format!(
                "feature row of {} values in a {}-feature table",
                features.len(),
                self.feature_count
            )));
        }
        if features.iter().any(|f| !f.is_finite()) {
            return Err(Error::NonFinite(format!(
                "features of ({}, {})",
                query_id, doc_id
            )));
        }
        self.rows
            .push((query_id.to_string(), doc_id.to_string(), features));
        Ok(())
    }

    pub fn rows(&self) -> &[(String, String, Vec<f64>)] {
        &self.rows
    }
}

/// A fitted linear feature combination and its training-fold metric.
#[derive(Debug, Clone)]
pub struct FusionModel {
    pub weights: Vec<f64>,
    pub training_metric: f64,
    /// Training metric after each sweep, one trace per restart.
    pub restart_traces: Vec<Vec<f64>>,
}

impl FusionModel {
    pub fn score(&self, features: &[f64]) -> f64 {
        self.weights
            .iter()
            .zip(features)
            .map(|(w, f)| w * f)
            .sum()
    }
}

/// Pre-resolved evaluation state: rows grouped by query, grades looked up
/// once, ties broken by each row's per-query doc-id rank.
struct Evaluator {
    // per query: (row indices, grade per row, doc-id tie rank per row, idcg)
    queries: Vec<QueryBlock>,
    k: usize,
}

struct QueryBlock {
    rows: Vec<usize>,
    grades: Vec<u32>,
    tie_rank: Vec<usize>,
    idcg: f64,
}

impl Evaluator {
    fn new(table: &FeatureTable, qrels: &RelevanceJudgments, k: usize) -> Result<Self> {
        let mut by_query: Vec<(String, Vec<usize>)> = Vec::new();
        for (i, (qid, _, _)) in table.rows().iter().enumerate() {
            match by_query.iter_mut().find(|(q, _)| q == qid) {
                Some((_, rows)) => rows.push(i),
                None => by_query.push((qid.clone(), vec![i])),
            }
        }
        let mut queries = Vec::new();
        let mut any_multi_doc = false;
        for (qid, rows) in by_query {
            if !qrels.has_query(&qid) {
                return Err(Error::Data(format!("query {} has no judgments", qid)));
            }
            if rows.len() >= 2 {
                any_multi_doc = true;
            }
            let grades: Vec<u32> = rows
                .iter()
                .map(|r| qrels.grade(&qid, &table.rows()[*r].1))
                .collect();
            let mut order: Vec<usize> = (0..rows.len()).collect();
            order.sort_by(|a, b| table.rows()[rows[*a]].1.cmp(&table.rows()[rows[*b]].1));
            let mut tie_rank = vec![0usize; rows.len()];
            for (rank, idx) in order.into_iter().enumerate() {
                tie_rank[idx] = rank;
            }
            let judged = qrels.judged_docs(&qid).expect("checked above");
            let mut ideal: Vec<u32> = judged.values().copied().collect();
            ideal.sort_unstable_by(|a, b| b.cmp(a));
            let idcg: f64 = ideal
                .iter()
                .take(k)
                .enumerate()
                .map(|(r, g)| (2f64.powi(*g as i32) - 1.0) / ((r + 2) as f64).log2())
                .sum();
            queries.push(QueryBlock {
                rows,
                grades,
                tie_rank,
                idcg,
            });
        }
        if !any_multi_doc {
            return Err(Error::Data(
                "coordinate ascent needs at least one query with two documents".into(),
            ));
        }
        Ok(Evaluator { queries, k })
    }

    /// Mean NDCG@k of the current row scores; matches `eval::ndcg_at_k`
    /// applied to lists built with the same tie rule.
    fn mean_ndcg(&self, scores: &[f64]) -> f64 {
        let mut sum = 0.0;
        for q in &self.queries {
            if q.idcg == 0.0 {
                continue;
            }
            let mut order: Vec<usize> = (0..q.rows.len()).collect();
            order.sort_by(|a, b| {
                scores[q.rows[*b]]
                    .partial_cmp(&scores[q.rows[*a]])
                    .expect("finite scores")
                    .then_with(|| q.tie_rank[*a].cmp(&q.tie_rank[*b]))
            });
            let mut dcg = 0.0;
            for (r, idx) in order.iter().take(self.k).enumerate() {
                dcg += (2f64.powi(q.grades[*idx] as i32) - 1.0) / ((r + 2) as f64).log2();
            }
            sum += dcg / q.idcg;
        }
        sum / self.queries.len() as f64
    }
}

fn candidates(w: f64) -> Vec<f64> {
    let base = if w == 0.0 { 1.0 } else { w };
    let mut out = Vec::with_capacity(GRID.len() * 2);
    for d in GRID {
        out.push(base * (1.0 + d));
        out.push(base * (1.0 - d));
    }
    out
}

/// Fit a linear feature combination maximizing mean NDCG@k on the table.
///
/// Runs `restarts` independent ascents; each entry of `seed_inits` is
/// consumed as the starting point of one restart before random starts are
/// drawn. Within a restart, only strictly improving single-weight moves
/// are accepted, so the training metric never decreases across sweeps.
pub fn coordinate_ascent(
    table: &FeatureTable,
    qrels: &RelevanceJudgments,
    k: usize,
    restarts: usize,
    rng: &mut impl Rng,
    seed_inits: &[Vec<f64>],
) -> Result<FusionModel> {
    if table.rows().is_empty() || restarts == 0 {
        return Err(Error::Data("coordinate ascent needs rows and restarts".into()));
    }
    let nf = table.feature_count;
    let evaluator = Evaluator::new(table, qrels, k)?;
    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut restart_traces = Vec::with_capacity(restarts);

    for restart in 0..restarts {
        let mut weights: Vec<f64> = match seed_inits.get(restart) {
            Some(init) => {
                if init.len() != nf {
                    return Err(Error::Shape(format!(
                        "seed init of {} weights in a {}-feature table",
                        init.len(),
                        nf
                    )));
                }
                init.clone()
            }
            None => (0..nf).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        };
        // per-row scores maintained incrementally across weight updates
        let mut scores: Vec<f64> = table
            .rows()
            .iter()
            .map(|(_, _, f)| weights.iter().zip(f).map(|(w, x)| w * x).sum())
            .collect();
        let mut metric = evaluator.mean_ndcg(&scores);
        let mut trace = Vec::new();

        for _sweep in 0..MAX_SWEEPS {
            let mut improved = false;
            for j in 0..nf {
                let current = weights[j];
                // scores with feature j zeroed out
                let base: Vec<f64> = table
                    .rows()
                    .iter()
                    .zip(&scores)
                    .map(|((_, _, f), s)| s - current * f[j])
                    .collect();
                let mut best_w = current;
                let mut best_m = metric;
                for cand in candidates(current) {
                    let trial: Vec<f64> = table
                        .rows()
                        .iter()
                        .zip(&base)
                        .map(|((_, _, f), b)| b + cand * f[j])
                        .collect();
                    let m = evaluator.mean_ndcg(&trial);
                    if m > best_m {
                        best_m = m;
                        best_w = cand;
                    }
                }
                if best_w != current {
                    weights[j] = best_w;
                    for (i, (_, _, f)) in table.rows().iter().enumerate() {
                        scores[i] = base[i] + best_w * f[j];
                    }
                    metric = best_m;
                    improved = true;
                }
            }
            trace.push(metric);
            if !improved {
                break;
            }
        }
        restart_traces.push(trace);

        let replace = match &best {
            Some((_, m)) => metric > *m,
            None => true,
        };
        if replace {
            best = Some((weights.clone(), metric));
        }
    }
    let (weights, training_metric) = best.expect("at least one restart ran");
    Ok(FusionModel {
        weights,
        training_metric,
        restart_traces,
    })
}
