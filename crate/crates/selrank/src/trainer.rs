//! Interactive training loop: per batch the policy selects pairs, the
//! ranker takes a gradient step on them, and the change in validation
//! NDCG becomes the reward; every T batches the policy receives one
//! REINFORCE update. Folds, early stopping and trace/decision logging
//! live here too.

use std::collections::{HashMap, HashSet};

use crate::bm25::{Bm25Params, InvertedIndex};
use crate::corpus::{AnchorDocPair, Corpus, EmbeddingTable, RelevanceJudgments, TokenSeq};
use crate::error::{Error, Result};
use crate::eval::{kfold_split, ndcg_at_k, RankedList};
use crate::policy::{ActMode, Decision, EpisodeBuffer, EpisodeStep, PolicyConfig, PolicyParams};
use crate::ranker::{RankerConfig, RankerParams, TrainingPair};
use crate::rngutil;

/// Loop hyper-parameters.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Batches per episode (T).
    pub episode_len: usize,
    /// Return discount (c).
    pub discount: f64,
    /// Policy ascent rate (alpha).
    pub policy_lr: f64,
    pub ranker_lr: f64,
    /// Anchor-document pairs per batch.
    pub batch_size: usize,
    pub negatives_per_anchor: usize,
    /// Reward/eval cutoff k.
    pub reward_k: usize,
    /// Episodes without improvement before stopping.
    pub patience: usize,
    pub master_seed: u64,
    /// Ranker gradient steps per selected batch.
    pub steps_per_batch: usize,
    /// Hard cap on episodes per fold.
    pub max_episodes: usize,
    /// Discriminator warm-up epochs (0 skips warm-up).
    pub warmup_epochs: usize,
    /// Warm-up Adam rate, independent of the REINFORCE ascent rate.
    pub warmup_lr: f64,
    /// Cap on warm-up pairs per class.
    pub warmup_pairs_cap: usize,
    pub folds: usize,
    /// Validation candidate pool depth per query.
    pub pool_depth: usize,
    /// Worker threads for reward evaluation.
    pub eval_threads: usize,
    pub bm25: Bm25Params,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            episode_len: 4,
            discount: 0.99,
            policy_lr: 1e-3,
            ranker_lr: 1e-3,
            batch_size: 16,
            negatives_per_anchor: 2,
            reward_k: 20,
            patience: 3,
            master_seed: 1,
            steps_per_batch: 1,
            max_episodes: 50,
            warmup_epochs: 2,
            warmup_lr: 1e-3,
            warmup_pairs_cap: 256,
            folds: 5,
            pool_depth: 20,
            eval_threads: 1,
            bm25: Bm25Params::default(),
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.episode_len == 0 || self.patience == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "episode_len, patience and batch_size must be >= 1".into(),
            ));
        }
        if !(self.discount > 0.0 && self.discount <= 1.0) {
            return Err(Error::Config(format!(
                "discount must lie in (0, 1], got {}",
                self.discount
            )));
        }
        Ok(())
    }
}

/// Selection regime of a run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TrainMode {
    /// Policy-sampled selection with REINFORCE updates.
    ReInfoSelect,
    /// Every pair selected, policy untouched.
    AllAnchor,
    /// Pairs whose warm-up selection probability clears the threshold,
    /// fixed for the whole run; policy untouched after warm-up.
    DiscriminatorSelect { threshold: f64 },
}

impl TrainMode {
    pub fn label(&self) -> &'static str {
        match self {
            TrainMode::ReInfoSelect => "reinfoselect",
            TrainMode::AllAnchor => "all-anchor",
            TrainMode::DiscriminatorSelect { .. } => "discriminator-select",
        }
    }
}

/// One trace row per consumed batch.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub batch: usize,
    pub selected_frac: f64,
    pub reward: f64,
    pub val_ndcg: f64,
}

pub fn trace_to_csv(rows: &[TraceRow]) -> String {
    let mut out = String::from("batch,selected_frac,reward,val_ndcg\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.batch, r.selected_frac, r.reward, r.val_ndcg
        ));
    }
    out
}

/// A stream element: anchor, its linked (positive) document and the
/// pre-sampled negative documents.
#[derive(Debug, Clone)]
pub struct StreamPair {
    pub pair_id: u64,
    pub anchor: TokenSeq,
    pub positive: TokenSeq,
    pub negatives: Vec<TokenSeq>,
}

/// Everything a training run reads.
pub struct TrainInputs<'a> {
    pub corpus: &'a Corpus,
    pub index: &'a InvertedIndex,
    pub anchors: &'a [AnchorDocPair],
    pub queries: &'a [(String, TokenSeq)],
    pub qrels: &'a RelevanceJudgments,
    /// Pre-trained word vectors for both the ranker and the policy; fresh
    /// seeded tables when absent.
    pub embeddings: Option<&'a EmbeddingTable>,
}

/// Shuffle anchors once with the master seed and pre-sample negatives, so
/// every mode and fold consumes the identical stream.
pub fn prepare_stream(inputs: &TrainInputs, cfg: &TrainConfig) -> Result<Vec<StreamPair>> {
    use rand::Rng;
    let mut order: Vec<usize> = (0..inputs.anchors.len()).collect();
    let mut shuffle_rng = rngutil::stream(cfg.master_seed, "anchor-shuffle");
    for i in (1..order.len()).rev() {
        let j = shuffle_rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let mut neg_rng = rngutil::stream(cfg.master_seed, "negatives");
    let mut stream = Vec::with_capacity(order.len());
    for idx in order {
        let pair = &inputs.anchors[idx];
        let positive = inputs
            .corpus
            .doc(&pair.linked_doc_id)
            .ok_or_else(|| Error::Data(format!("missing doc {}", pair.linked_doc_id)))?
            .clone();
        if positive.is_empty() {
            continue;
        }
        let neg_ids = inputs.index.sample_negatives(
            pair,
            cfg.negatives_per_anchor,
            &cfg.bm25,
            &mut neg_rng,
        )?;
        let negatives: Vec<TokenSeq> = neg_ids
            .iter()
            .filter_map(|d| inputs.corpus.doc(d))
            .filter(|d| !d.is_empty())
            .cloned()
            .collect();
        if negatives.is_empty() {
            continue;
        }
        stream.push(StreamPair {
            pair_id: pair.pair_id,
            anchor: pair.anchor.clone(),
            positive,
            negatives,
        });
    }
    if stream.is_empty() {
        return Err(Error::Data("anchor stream is empty".into()));
    }
    Ok(stream)
}

/// Warm-up classes: training-fold (query, relevant doc) pairs as
/// positives, stream-order (anchor, linked doc) pairs as negatives, each
/// capped at `warmup_pairs_cap`.
pub fn warmup_sets(
    corpus: &Corpus,
    qrels: &RelevanceJudgments,
    train_queries: &[(String, TokenSeq)],
    stream: &[StreamPair],
    cfg: &TrainConfig,
) -> (Vec<(TokenSeq, TokenSeq)>, Vec<(TokenSeq, TokenSeq)>) {
    // round-robin across queries (highest grades first) so the positive
    // class spans every training query instead of exhausting the cap on
    // the first one
    let mut per_query: Vec<Vec<(TokenSeq, TokenSeq)>> = Vec::new();
    for (qid, qseq) in train_queries {
        let Some(judged) = qrels.judged_docs(qid) else {
            continue;
        };
        let mut docs: Vec<(&String, &u32)> = judged.iter().filter(|(_, g)| **g > 0).collect();
        docs.sort_by(|a, b| b.1.cmp(a.1).then_with(|| a.0.cmp(b.0)));
        let rows: Vec<(TokenSeq, TokenSeq)> = docs
            .into_iter()
            .filter_map(|(doc_id, _)| corpus.doc(doc_id))
            .filter(|d| !d.is_empty())
            .map(|d| (qseq.clone(), d.clone()))
            .collect();
        if !rows.is_empty() {
            per_query.push(rows);
        }
    }
    let mut pos = Vec::new();
    let mut depth = 0;
    'fill: loop {
        let mut any = false;
        for rows in &per_query {
            if let Some(pair) = rows.get(depth) {
                pos.push(pair.clone());
                any = true;
                if pos.len() >= cfg.warmup_pairs_cap {
                    break 'fill;
                }
            }
        }
        if !any {
            break;
        }
        depth += 1;
    }
    let mut neg: Vec<(TokenSeq, TokenSeq)> = stream
        .iter()
        .take(cfg.warmup_pairs_cap)
        .map(|p| (p.anchor.clone(), p.positive.clone()))
        .collect();
    // balanced classes keep the classifier's operating point near the
    // 0.5 threshold the selection stage uses
    let n = pos.len().min(neg.len());
    pos.truncate(n);
    neg.truncate(n);
    (pos, neg)
}

/// Fixed validation pools: per training-fold query, the BM25 top
/// `pool_depth` documents, frozen before training starts.
pub struct ValidationSet {
    pub queries: Vec<(String, TokenSeq)>,
    pub pools: Vec<Vec<String>>,
    docs: HashMap<String, TokenSeq>,
    pub qrels: RelevanceJudgments,
    pub k: usize,
}

pub fn build_validation(
    queries: &[(String, TokenSeq)],
    qrels: &RelevanceJudgments,
    corpus: &Corpus,
    index: &InvertedIndex,
    cfg: &TrainConfig,
) -> Result<ValidationSet> {
    let mut kept = Vec::new();
    let mut pools = Vec::new();
    let mut docs = HashMap::new();
    for (qid, seq) in queries {
        if !qrels.has_query(qid) || seq.is_empty() {
            continue;
        }
        let pool: Vec<String> = index
            .retrieve_topk(seq, cfg.pool_depth, &cfg.bm25)?
            .into_iter()
            .map(|(d, _)| d)
            .filter(|d| corpus.doc(d).map(|s| !s.is_empty()).unwrap_or(false))
            .collect();
        if pool.is_empty() {
            continue;
        }
        for d in &pool {
            docs.entry(d.clone())
                .or_insert_with(|| corpus.doc(d).expect("filtered above").clone());
        }
        kept.push((qid.clone(), seq.clone()));
        pools.push(pool);
    }
    if kept.is_empty() {
        return Err(Error::Data("validation set is empty".into()));
    }
    Ok(ValidationSet {
        queries: kept,
        pools,
        docs,
        qrels: qrels.clone(),
        k: cfg.reward_k,
    })
}

/// Run `f` over `items` on up to `threads` scoped workers; output order
/// follows input order regardless of scheduling.
fn parallel_map<T: Sync, R: Send>(
    items: &[T],
    threads: usize,
    f: impl Fn(&T) -> R + Sync,
) -> Vec<R> {
    let threads = threads.max(1).min(items.len().max(1));
    if threads <= 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    let mut out: Vec<Option<R>> = Vec::with_capacity(items.len());
    out.resize_with(items.len(), || None);
    {
        let mut slots: Vec<(usize, &mut [Option<R>])> = Vec::new();
        let mut rest = out.as_mut_slice();
        let mut start = 0;
        while !rest.is_empty() {
            let take = chunk.min(rest.len());
            let (head, tail) = rest.split_at_mut(take);
            slots.push((start, head));
            start += take;
            rest = tail;
        }
        std::thread::scope(|scope| {
            for (start, slot) in slots {
                let f = &f;
                scope.spawn(move || {
                    for (i, s) in slot.iter_mut().enumerate() {
                        *s = Some(f(&items[start + i]));
                    }
                });
            }
        });
    }
    out.into_iter()
        .map(|r| r.expect("worker filled slot"))
        .collect()
}

/// Mean NDCG@k of the ranker over the fixed validation pools. Document
/// gram embeddings are computed once per unique document per call, and
/// per-query scores reduce in query order for determinism.
pub fn mean_pool_ndcg(ranker: &RankerParams, val: &ValidationSet, threads: usize) -> Result<f64> {
    let mut unique: Vec<&String> = Vec::new();
    let mut seen = HashSet::new();
    for pool in &val.pools {
        for d in pool {
            if seen.insert(d.as_str()) {
                unique.push(d);
            }
        }
    }
    let gram_results = parallel_map(&unique, threads, |doc_id| {
        ranker.doc_grams(&val.docs[doc_id.as_str()])
    });
    let mut doc_grams = HashMap::with_capacity(unique.len());
    for (doc_id, grams) in unique.iter().zip(gram_results) {
        doc_grams.insert(doc_id.as_str(), grams?);
    }
    let indices: Vec<usize> = (0..val.queries.len()).collect();
    let per_query = parallel_map(&indices, threads, |qi| -> Result<f64> {
        let (qid, q) = &val.queries[*qi];
        let q_grams = ranker.doc_grams(q)?;
        let mut entries = Vec::with_capacity(val.pools[*qi].len());
        for doc_id in &val.pools[*qi] {
            let features = ranker.features_from_grams(&q_grams, &doc_grams[doc_id.as_str()])?;
            entries.push((doc_id.clone(), ranker.score_from_features(&features)));
        }
        ndcg_at_k(&RankedList::from_scores(qid, entries)?, &val.qrels, val.k)
    });
    let mut sum = 0.0;
    for r in per_query {
        sum += r?;
    }
    Ok(sum / val.queries.len() as f64)
}

/// Validation-NDCG change produced by a parameter update: the after
/// snapshot's mean pool NDCG minus the before snapshot's.
pub fn reward(
    after: &RankerParams,
    before: &RankerParams,
    val: &ValidationSet,
    threads: usize,
) -> Result<f64> {
    Ok(mean_pool_ndcg(after, val, threads)? - mean_pool_ndcg(before, val, threads)?)
}

/// Cycling cursor over the prepared anchor stream.
pub struct StreamCursor<'a> {
    stream: &'a [StreamPair],
    pos: usize,
}

impl<'a> StreamCursor<'a> {
    pub fn new(stream: &'a [StreamPair]) -> Self {
        StreamCursor { stream, pos: 0 }
    }

    fn next_batch(&mut self, size: usize) -> Vec<&'a StreamPair> {
        let mut batch = Vec::with_capacity(size);
        for _ in 0..size {
            batch.push(&self.stream[self.pos]);
            self.pos = (self.pos + 1) % self.stream.len();
        }
        batch
    }
}

/// Which pairs of a batch enter ranker training.
enum BatchSelection {
    Policy(ActMode),
    All,
    Fixed(HashSet<u64>),
}

/// Outcome of one episode.
pub struct EpisodeOutcome {
    pub buffer: EpisodeBuffer,
    pub trace: Vec<TraceRow>,
    pub decisions: Vec<Decision>,
    pub val_ndcg: f64,
}

struct EpisodeRunner<'a> {
    val: &'a ValidationSet,
    cfg: &'a TrainConfig,
    batch_counter: usize,
    val_ndcg: f64,
}

impl<'a> EpisodeRunner<'a> {
    fn new(val: &'a ValidationSet, cfg: &'a TrainConfig, initial_ndcg: f64) -> Self {
        EpisodeRunner {
            val,
            cfg,
            batch_counter: 0,
            val_ndcg: initial_ndcg,
        }
    }

    /// T batches of select -> train -> reward; returns a finalized episode.
    fn run_episode(
        &mut self,
        cursor: &mut StreamCursor,
        policy: &PolicyParams,
        ranker: &mut RankerParams,
        selection: &BatchSelection,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Result<EpisodeOutcome> {
        let mut buffer = EpisodeBuffer::new(self.cfg.discount);
        let mut trace = Vec::with_capacity(self.cfg.episode_len);
        let mut all_decisions = Vec::new();
        for _ in 0..self.cfg.episode_len {
            let batch = cursor.next_batch(self.cfg.batch_size);
            let triples: Vec<(u64, &TokenSeq, &TokenSeq)> = batch
                .iter()
                .map(|p| (p.pair_id, &p.anchor, &p.positive))
                .collect();
            let (selected, decisions) = match selection {
                BatchSelection::Policy(mode) => policy.select_batch(&triples, *mode, rng)?,
                BatchSelection::All => forced_decisions(&triples, |_| true),
                BatchSelection::Fixed(kept) => {
                    forced_decisions(&triples, |id| kept.contains(&id))
                }
            };
            let training: Vec<TrainingPair> = selected
                .iter()
                .flat_map(|i| {
                    let p = batch[*i];
                    p.negatives.iter().map(|n| TrainingPair {
                        anchor: p.anchor.clone(),
                        positive: p.positive.clone(),
                        negative: n.clone(),
                    })
                })
                .collect();
            let reward = if training.is_empty() {
                // nothing selected: ranker unchanged, NDCG unchanged
                0.0
            } else {
                for _ in 0..self.cfg.steps_per_batch.max(1) {
                    ranker.train_step(&training, self.cfg.ranker_lr)?;
                }
                let now = mean_pool_ndcg(ranker, self.val, self.cfg.eval_threads)?;
                let r = now - self.val_ndcg;
                self.val_ndcg = now;
                r
            };
            self.batch_counter += 1;
            trace.push(TraceRow {
                batch: self.batch_counter,
                selected_frac: selected.len() as f64 / batch.len() as f64,
                reward,
                val_ndcg: self.val_ndcg,
            });
            let step = EpisodeStep {
                pairs: batch
                    .iter()
                    .map(|p| (p.anchor.clone(), p.positive.clone()))
                    .collect(),
                decisions: decisions.clone(),
            };
            all_decisions.extend(decisions);
            buffer.push_step(step, reward);
        }
        buffer.finalize()?;
        Ok(EpisodeOutcome {
            buffer,
            trace,
            decisions: all_decisions,
            val_ndcg: self.val_ndcg,
        })
    }
}

fn forced_decisions(
    triples: &[(u64, &TokenSeq, &TokenSeq)],
    select: impl Fn(u64) -> bool,
) -> (Vec<usize>, Vec<Decision>) {
    let mut selected = Vec::new();
    let mut decisions = Vec::with_capacity(triples.len());
    for (i, (pair_id, _, _)) in triples.iter().enumerate() {
        let take = select(*pair_id);
        if take {
            selected.push(i);
        }
        decisions.push(Decision {
            pair_id: *pair_id,
            action: u8::from(take),
            prob_select: f64::from(u8::from(take)),
            log_prob: 0.0,
        });
    }
    (selected, decisions)
}

/// Result of one fold run.
pub struct FoldOutcome {
    pub fold: usize,
    pub ranker: RankerParams,
    pub policy: PolicyParams,
    pub trace: Vec<TraceRow>,
    pub decisions: Vec<Decision>,
    pub final_val_ndcg: f64,
    pub initial_val_ndcg: f64,
    pub warmup_accuracy: Option<f64>,
    pub episodes_run: usize,
    /// Query ids whose judgments were reachable during training; the
    /// driver appends these to the audit log.
    pub audit: Vec<String>,
}

/// Train on every fold except `test_fold`, with rewards and early stopping
/// evaluated only on training-fold queries.
#[allow(clippy::too_many_arguments)]
pub fn train_fold(
    inputs: &TrainInputs,
    stream: &[StreamPair],
    assignment: &[usize],
    test_fold: usize,
    mode: TrainMode,
    cfg: &TrainConfig,
    ranker_cfg: &RankerConfig,
    policy_cfg: &PolicyConfig,
) -> Result<FoldOutcome> {
    cfg.validate()?;
    let train_queries: Vec<(String, TokenSeq)> = inputs
        .queries
        .iter()
        .zip(assignment)
        .filter(|(_, fold)| **fold != test_fold)
        .map(|((qid, seq), _)| (qid.clone(), seq.clone()))
        .collect();
    let allowed: HashSet<String> = train_queries.iter().map(|(q, _)| q.clone()).collect();
    let restricted = inputs.qrels.restricted_to(&allowed);
    let audit = vec![format!(
        "fold {} training judgments: {}",
        test_fold,
        train_queries
            .iter()
            .map(|(q, _)| q.as_str())
            .collect::<Vec<_>>()
            .join(" ")
    )];
    let seed_tag = |what: &str| -> u64 {
        use rand::Rng;
        rngutil::stream(cfg.master_seed, &format!("fold{}-{}", test_fold, what)).gen()
    };
    let vocab = inputs.corpus.vocab.len();
    let ranker = RankerParams::init(vocab, ranker_cfg.clone(), inputs.embeddings, seed_tag("ranker"))?;
    let policy = PolicyParams::init(vocab, policy_cfg.clone(), inputs.embeddings, seed_tag("policy"))?;
    train_fold_with_models(
        inputs,
        stream,
        test_fold,
        mode,
        cfg,
        ranker,
        policy,
        restricted,
        train_queries,
        audit,
    )
}

/// [`train_fold`] with caller-supplied models, for rigged-policy
/// equivalence checks and warm-started runs.
#[allow(clippy::too_many_arguments)]
pub fn train_fold_with_models(
    inputs: &TrainInputs,
    stream: &[StreamPair],
    test_fold: usize,
    mode: TrainMode,
    cfg: &TrainConfig,
    mut ranker: RankerParams,
    mut policy: PolicyParams,
    restricted: RelevanceJudgments,
    train_queries: Vec<(String, TokenSeq)>,
    mut audit: Vec<String>,
) -> Result<FoldOutcome> {
    let val = build_validation(&train_queries, &restricted, inputs.corpus, inputs.index, cfg)?;
    audit.push(format!(
        "fold {} reward pools over {} queries at depth {}",
        test_fold,
        val.queries.len(),
        cfg.pool_depth
    ));

    // warm-up: training-fold query-document pairs vs anchor-document pairs
    let mut warmup_accuracy = None;
    let needs_policy = !matches!(mode, TrainMode::AllAnchor);
    let warmup_epochs = match mode {
        TrainMode::DiscriminatorSelect { .. } => cfg.warmup_epochs.max(1),
        _ => cfg.warmup_epochs,
    };
    if needs_policy && warmup_epochs > 0 {
        let (pos, neg) = warmup_sets(inputs.corpus, &restricted, &train_queries, stream, cfg);
        let mut warm_rng = rngutil::stream(cfg.master_seed, &format!("fold{}-warmup", test_fold));
        let report =
            policy.warmup_discriminator(&pos, &neg, warmup_epochs, cfg.warmup_lr, &mut warm_rng)?;
        warmup_accuracy = Some(report.accuracy);
    }

    // discriminator mode freezes its kept set before any training
    let selection = match mode {
        TrainMode::ReInfoSelect => BatchSelection::Policy(ActMode::Sample),
        TrainMode::AllAnchor => BatchSelection::All,
        TrainMode::DiscriminatorSelect { threshold } => {
            let mut kept = HashSet::new();
            for p in stream {
                let state = policy.encode_state(&p.anchor, &p.positive)?;
                let logits = policy.logits(&state)?;
                let m = logits[0].max(logits[1]);
                let p_sel = (logits[1] - m).exp() / ((logits[0] - m).exp() + (logits[1] - m).exp());
                if p_sel >= threshold {
                    kept.insert(p.pair_id);
                }
            }
            if kept.is_empty() {
                return Err(Error::Data(format!(
                    "discriminator kept 0 of {} stream pairs at threshold {}",
                    stream.len(),
                    threshold
                )));
            }
            BatchSelection::Fixed(kept)
        }
    };

    let initial_val_ndcg = mean_pool_ndcg(&ranker, &val, cfg.eval_threads)?;
    let mut runner = EpisodeRunner::new(&val, cfg, initial_val_ndcg);
    let mut cursor = StreamCursor::new(stream);
    let mut sel_rng = rngutil::stream(cfg.master_seed, &format!("fold{}-selection", test_fold));
    let mut trace = Vec::new();
    let mut decisions = Vec::new();
    let mut best = initial_val_ndcg;
    let mut stale = 0usize;
    let mut episodes_run = 0usize;
    while episodes_run < cfg.max_episodes {
        let outcome =
            runner.run_episode(&mut cursor, &policy, &mut ranker, &selection, &mut sel_rng)?;
        episodes_run += 1;
        trace.extend(outcome.trace);
        decisions.extend(outcome.decisions);
        if matches!(mode, TrainMode::ReInfoSelect) {
            policy.policy_update(&outcome.buffer, cfg.policy_lr)?;
        }
        if outcome.val_ndcg > best {
            best = outcome.val_ndcg;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    let final_val_ndcg = runner.val_ndcg;
    Ok(FoldOutcome {
        fold: test_fold,
        ranker,
        policy,
        trace,
        decisions,
        final_val_ndcg,
        initial_val_ndcg,
        warmup_accuracy,
        episodes_run,
        audit,
    })
}

/// Full run outcome across folds.
pub struct TrainOutcome {
    pub folds: Vec<FoldOutcome>,
    pub assignment: Vec<usize>,
}

/// Five-fold (by default) training: each fold is held out once while the
/// remaining queries drive warm-up, rewards and early stopping.
pub fn full_train(
    inputs: &TrainInputs,
    mode: TrainMode,
    cfg: &TrainConfig,
    ranker_cfg: &RankerConfig,
    policy_cfg: &PolicyConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if inputs.queries.len() < cfg.folds {
        return Err(Error::Data(format!(
            "{} labeled queries cannot fill {} folds",
            inputs.queries.len(),
            cfg.folds
        )));
    }
    let qids: Vec<String> = inputs.queries.iter().map(|(q, _)| q.clone()).collect();
    let assignment = kfold_split(&qids, cfg.folds, cfg.master_seed);
    let stream = prepare_stream(inputs, cfg)?;
    let mut folds = Vec::with_capacity(cfg.folds);
    for test_fold in 0..cfg.folds {
        folds.push(train_fold(
            inputs,
            &stream,
            &assignment,
            test_fold,
            mode,
            cfg,
            ranker_cfg,
            policy_cfg,
        )?);
    }
    Ok(TrainOutcome { folds, assignment })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{load_anchor_pairs, load_corpus, load_queries, read_qrels, NormConfig};
    use crate::synth::{generate_synth, SynthSpec};

    pub(crate) fn tiny_ranker_cfg() -> RankerConfig {
        RankerConfig {
            embed_dim: 8,
            filters: 4,
            ..RankerConfig::default()
        }
    }

    pub(crate) fn tiny_policy_cfg() -> PolicyConfig {
        PolicyConfig {
            embed_dim: 8,
            state_filters: 4,
            interaction_filters: 4,
            ..PolicyConfig::default()
        }
    }

    struct Fixture {
        corpus: Corpus,
        index: InvertedIndex,
        anchors: Vec<AnchorDocPair>,
        queries: Vec<(String, TokenSeq)>,
        qrels: RelevanceJudgments,
    }

    fn fixture(seed: u64) -> Fixture {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            topics: 3,
            docs_per_topic: 40,
            vocab_size: 150,
            anchors: 40,
            noise_rate: 0.3,
            queries: 12,
            seed,
        };
        let paths = generate_synth(&spec, dir.path()).unwrap();
        let norm = NormConfig::default();
        let corpus = load_corpus(&paths.docs, &norm).unwrap();
        let index = InvertedIndex::from_corpus(&corpus).unwrap();
        let anchors = load_anchor_pairs(&paths.anchors, &norm, &corpus).unwrap();
        let queries = load_queries(&paths.queries, &norm, &corpus.vocab).unwrap();
        let qrels = read_qrels(&paths.qrels).unwrap();
        Fixture {
            corpus,
            index,
            anchors,
            queries,
            qrels,
        }
    }

    fn tiny_cfg(seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: 6,
            negatives_per_anchor: 1,
            max_episodes: 2,
            warmup_epochs: 1,
            warmup_pairs_cap: 24,
            pool_depth: 8,
            folds: 3,
            master_seed: seed,
            ..TrainConfig::default()
        }
    }

    fn inputs(f: &Fixture) -> TrainInputs {
        TrainInputs {
            corpus: &f.corpus,
            index: &f.index,
            anchors: &f.anchors,
            queries: &f.queries,
            qrels: &f.qrels,
            embeddings: None,
        }
    }

    #[test]
    fn stream_is_seed_stable_and_complete() {
        let f = fixture(2);
        let cfg = tiny_cfg(7);
        let s1 = prepare_stream(&inputs(&f), &cfg).unwrap();
        let s2 = prepare_stream(&inputs(&f), &cfg).unwrap();
        assert_eq!(s1.len(), s2.len());
        for (a, b) in s1.iter().zip(&s2) {
            assert_eq!(a.pair_id, b.pair_id);
            assert_eq!(a.negatives.len(), b.negatives.len());
        }
        // all anchors survive (synthetic docs are never empty)
        assert_eq!(s1.len(), f.anchors.len());
    }

    #[test]
    fn identical_snapshots_give_zero_reward_and_swap_negates() {
        let f = fixture(3);
        let cfg = tiny_cfg(5);
        let val = build_validation(&f.queries, &f.qrels, &f.corpus, &f.index, &cfg).unwrap();
        let ranker_a = RankerParams::init(f.corpus.vocab.len(), tiny_ranker_cfg(), None, 1).unwrap();
        let mut ranker_b =
            RankerParams::init(f.corpus.vocab.len(), tiny_ranker_cfg(), None, 2).unwrap();
        assert_eq!(reward(&ranker_a, &ranker_a, &val, 1).unwrap(), 0.0);
        // train b a little so the two orderings differ
        let stream = prepare_stream(&inputs(&f), &cfg).unwrap();
        let batch: Vec<TrainingPair> = stream[..4]
            .iter()
            .map(|p| TrainingPair {
                anchor: p.anchor.clone(),
                positive: p.positive.clone(),
                negative: p.negatives[0].clone(),
            })
            .collect();
        for _ in 0..3 {
            ranker_b.train_step(&batch, 1e-2).unwrap();
        }
        let ab = reward(&ranker_a, &ranker_b, &val, 1).unwrap();
        let ba = reward(&ranker_b, &ranker_a, &val, 1).unwrap();
        assert!((ab + ba).abs() < 1e-12);
    }

    // Hand NDCG evaluation: one query, two docs with grades (1, 0).
    // Perfect ordering scores 1.0; inverted scores 1/log2(3); the reward
    // for going from inverted to perfect is 1 - 1/log2(3) = 0.36907...
    #[test]
    fn reward_matches_hand_computed_ndcg_change() {
        use crate::eval::mean_metric;
        let mut qrels = RelevanceJudgments::new();
        qrels.insert("q", "da", 1).unwrap();
        qrels.insert("q", "db", 0).unwrap();
        let perfect =
            RankedList::from_scores("q", vec![("da".into(), 0.9), ("db".into(), 0.1)]).unwrap();
        let inverted =
            RankedList::from_scores("q", vec![("db".into(), 0.9), ("da".into(), 0.1)]).unwrap();
        let after = mean_metric(&[perfect], &qrels, |l, q| ndcg_at_k(l, q, 20)).unwrap();
        let before = mean_metric(&[inverted], &qrels, |l, q| ndcg_at_k(l, q, 20)).unwrap();
        let r = after - before;
        assert!((r - (1.0 - 1.0 / 3f64.log2())).abs() < 1e-12);
        assert!((r - 0.3691).abs() < 5e-5);
    }

    #[test]
    fn all_reject_policy_leaves_ranker_unchanged_with_zero_rewards() {
        let f = fixture(4);
        let cfg = tiny_cfg(6);
        let stream = prepare_stream(&inputs(&f), &cfg).unwrap();
        let val = build_validation(&f.queries, &f.qrels, &f.corpus, &f.index, &cfg).unwrap();
        let mut ranker =
            RankerParams::init(f.corpus.vocab.len(), tiny_ranker_cfg(), None, 9).unwrap();
        let mut policy =
            PolicyParams::init(f.corpus.vocab.len(), tiny_policy_cfg(), None, 9).unwrap();
        policy.force_action_bias(40.0, -40.0).unwrap();
        let before: Vec<Vec<f64>> = ranker
            .store
            .ids()
            .map(|id| ranker.store.value(id).data().to_vec())
            .collect();
        let initial = mean_pool_ndcg(&ranker, &val, 1).unwrap();
        let mut runner = EpisodeRunner::new(&val, &cfg, initial);
        let mut cursor = StreamCursor::new(&stream);
        let mut rng = rngutil::stream(1, "test-sel");
        let outcome = runner
            .run_episode(
                &mut cursor,
                &policy,
                &mut ranker,
                &BatchSelection::Policy(ActMode::Sample),
                &mut rng,
            )
            .unwrap();
        assert!(outcome.buffer.rewards().iter().all(|r| *r == 0.0));
        assert!(outcome.trace.iter().all(|t| t.selected_frac == 0.0));
        let after: Vec<Vec<f64>> = ranker
            .store
            .ids()
            .map(|id| ranker.store.value(id).data().to_vec())
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn episode_is_bit_reproducible() {
        let f = fixture(5);
        let cfg = tiny_cfg(8);
        let stream = prepare_stream(&inputs(&f), &cfg).unwrap();
        let val = build_validation(&f.queries, &f.qrels, &f.corpus, &f.index, &cfg).unwrap();
        let run = || {
            let mut ranker =
                RankerParams::init(f.corpus.vocab.len(), tiny_ranker_cfg(), None, 3).unwrap();
            let policy =
                PolicyParams::init(f.corpus.vocab.len(), tiny_policy_cfg(), None, 3).unwrap();
            let initial = mean_pool_ndcg(&ranker, &val, 1).unwrap();
            let mut runner = EpisodeRunner::new(&val, &cfg, initial);
            let mut cursor = StreamCursor::new(&stream);
            let mut rng = rngutil::stream(2, "test-sel");
            let outcome = runner
                .run_episode(
                    &mut cursor,
                    &policy,
                    &mut ranker,
                    &BatchSelection::Policy(ActMode::Sample),
                    &mut rng,
                )
                .unwrap();
            (outcome.buffer.rewards().to_vec(), outcome.trace, outcome.decisions)
        };
        let (r1, t1, d1) = run();
        let (r2, t2, d2) = run();
        assert_eq!(r1, r2);
        assert_eq!(t1, t2);
        assert_eq!(d1, d2);
    }

    #[test]
    fn trace_fractions_match_decision_logs() {
        let f = fixture(6);
        let cfg = tiny_cfg(9);
        let stream = prepare_stream(&inputs(&f), &cfg).unwrap();
        let val = build_validation(&f.queries, &f.qrels, &f.corpus, &f.index, &cfg).unwrap();
        let mut ranker =
            RankerParams::init(f.corpus.vocab.len(), tiny_ranker_cfg(), None, 3).unwrap();
        let policy =
            PolicyParams::init(f.corpus.vocab.len(), tiny_policy_cfg(), None, 3).unwrap();
        let initial = mean_pool_ndcg(&ranker, &val, 1).unwrap();
        let mut runner = EpisodeRunner::new(&val, &cfg, initial);
        let mut cursor = StreamCursor::new(&stream);
        let mut rng = rngutil::stream(4, "test-sel");
        let outcome = runner
            .run_episode(
                &mut cursor,
                &policy,
                &mut ranker,
                &BatchSelection::Policy(ActMode::Sample),
                &mut rng,
            )
            .unwrap();
        let mut offset = 0;
        for row in &outcome.trace {
            let batch = &outcome.decisions[offset..offset + cfg.batch_size];
            let selected = batch.iter().filter(|d| d.action == 1).count();
            assert!(
                (row.selected_frac - selected as f64 / cfg.batch_size as f64).abs() < 1e-12
            );
            offset += cfg.batch_size;
        }
    }

    #[test]
    fn patience_stops_when_nothing_improves() {
        let f = fixture(7);
        let mut cfg = tiny_cfg(10);
        cfg.patience = 2;
        cfg.max_episodes = 50;
        cfg.warmup_epochs = 0;
        let stream = prepare_stream(&inputs(&f), &cfg).unwrap();
        let assignment = kfold_split(
            &f.queries.iter().map(|(q, _)| q.clone()).collect::<Vec<_>>(),
            cfg.folds,
            cfg.master_seed,
        );
        let inp = inputs(&f);
        let outcome = train_fold(
            &inp,
            &stream,
            &assignment,
            0,
            TrainMode::DiscriminatorSelect { threshold: 0.0 },
            &cfg,
            &tiny_ranker_cfg(),
            &tiny_policy_cfg(),
        )
        .unwrap();
        assert!(outcome.episodes_run <= cfg.max_episodes);
        // threshold 0 keeps everything, so training happens; just check the
        // stopping bookkeeping is sane
        assert_eq!(
            outcome.trace.len(),
            outcome.episodes_run * cfg.episode_len
        );
    }

    #[test]
    fn all_anchor_equals_threshold_zero_discriminator() {
        let f = fixture(8);
        let mut cfg = tiny_cfg(11);
        cfg.max_episodes = 2;
        let stream = prepare_stream(&inputs(&f), &cfg).unwrap();
        let qids: Vec<String> = f.queries.iter().map(|(q, _)| q.clone()).collect();
        let assignment = kfold_split(&qids, cfg.folds, cfg.master_seed);
        let inp = inputs(&f);
        let a = train_fold(
            &inp,
            &stream,
            &assignment,
            0,
            TrainMode::AllAnchor,
            &cfg,
            &tiny_ranker_cfg(),
            &tiny_policy_cfg(),
        )
        .unwrap();
        let b = train_fold(
            &inp,
            &stream,
            &assignment,
            0,
            TrainMode::DiscriminatorSelect { threshold: 0.0 },
            &cfg,
            &tiny_ranker_cfg(),
            &tiny_policy_cfg(),
        )
        .unwrap();
        for (ia, ib) in a.ranker.store.ids().zip(b.ranker.store.ids()) {
            assert_eq!(
                a.ranker.store.value(ia).data(),
                b.ranker.store.value(ib).data()
            );
        }
        assert!(a.trace.iter().all(|t| t.selected_frac == 1.0));
    }

    #[test]
    fn audit_never_names_test_fold_queries() {
        let f = fixture(9);
        let cfg = tiny_cfg(12);
        let stream = prepare_stream(&inputs(&f), &cfg).unwrap();
        let qids: Vec<String> = f.queries.iter().map(|(q, _)| q.clone()).collect();
        let assignment = kfold_split(&qids, cfg.folds, cfg.master_seed);
        let inp = inputs(&f);
        let outcome = train_fold(
            &inp,
            &stream,
            &assignment,
            1,
            TrainMode::AllAnchor,
            &cfg,
            &tiny_ranker_cfg(),
            &tiny_policy_cfg(),
        )
        .unwrap();
        let test_queries: Vec<&String> = qids
            .iter()
            .zip(&assignment)
            .filter(|(_, fold)| **fold == 1)
            .map(|(q, _)| q)
            .collect();
        assert!(!test_queries.is_empty());
        for line in &outcome.audit {
            for tq in &test_queries {
                assert!(
                    !line.split_whitespace().any(|w| w == tq.as_str()),
                    "audit leaked test query {}: {}",
                    tq,
                    line
                );
            }
        }
    }

    #[test]
    fn parallel_eval_matches_sequential() {
        let f = fixture(10);
        let cfg = tiny_cfg(13);
        let val = build_validation(&f.queries, &f.qrels, &f.corpus, &f.index, &cfg).unwrap();
        let ranker =
            RankerParams::init(f.corpus.vocab.len(), tiny_ranker_cfg(), None, 4).unwrap();
        let seq = mean_pool_ndcg(&ranker, &val, 1).unwrap();
        let par = mean_pool_ndcg(&ranker, &val, 4).unwrap();
        assert_eq!(seq, par);
    }
}
