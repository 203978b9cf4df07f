//! Sub-command implementations behind the command-line interface. Every
//! command writes its declared outputs and re-reads them before returning,
//! so a zero exit code means the files parse back cleanly.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::bm25::InvertedIndex;
use crate::ckpt;
use crate::config::{eval_threads, ExperimentConfig};
use crate::corpus::{
    load_anchor_pairs, load_corpus, load_embeddings, load_queries, read_qrels, read_run,
    write_run, Corpus, EmbeddingTable, RelevanceJudgments,
};
use crate::error::{Error, Result};
use crate::eval::{
    coordinate_ascent, err_at_k, kfold_split, mean_metric, ndcg_at_k, permutation_test,
    FeatureTable, RankedList,
};
use crate::policy::PolicyParams;
use crate::ranker::RankerParams;
use crate::rngutil;
use crate::synth::generate_synth;
use crate::trainer::{
    full_train, prepare_stream, trace_to_csv, warmup_sets, TrainInputs, TrainOutcome,
};

/// Generate the synthetic corpus, anchors, qrels and queries.
pub fn cmd_synth(cfg: &ExperimentConfig) -> Result<()> {
    let paths = generate_synth(&cfg.synth, &cfg.out)?;
    // parse-back check of everything just written
    let norm = cfg.norm_config();
    let corpus = load_corpus(&paths.docs, &norm)?;
    load_anchor_pairs(&paths.anchors, &norm, &corpus)?;
    load_queries(&paths.queries, &norm, &corpus.vocab)?;
    read_qrels(&paths.qrels)?;
    println!(
        "synth: wrote {} docs, {} anchors under {}",
        corpus.len(),
        cfg.synth.anchors,
        cfg.out.display()
    );
    Ok(())
}

/// Build the inverted index from the corpus TSV and write its snapshot.
pub fn cmd_index(cfg: &ExperimentConfig) -> Result<()> {
    cfg.require_paths(&["corpus"])?;
    let corpus = load_corpus(cfg.corpus.as_ref().unwrap(), &cfg.norm_config())?;
    let index = InvertedIndex::from_corpus(&corpus)?;
    fs::create_dir_all(&cfg.out)?;
    let snapshot = cfg.out.join("index.bin");
    index.save(&snapshot)?;
    let back = InvertedIndex::load(&snapshot)?;
    if back.doc_count() != index.doc_count() {
        return Err(Error::Data("index snapshot failed to round trip".into()));
    }
    println!(
        "index: {} docs, snapshot at {}",
        index.doc_count(),
        snapshot.display()
    );
    Ok(())
}

struct LoadedData {
    corpus: Corpus,
    index: InvertedIndex,
    anchors: Vec<crate::corpus::AnchorDocPair>,
    queries: Vec<(String, crate::corpus::TokenSeq)>,
    qrels: RelevanceJudgments,
    embeddings: Option<EmbeddingTable>,
}

fn load_data(cfg: &ExperimentConfig, need_anchors: bool) -> Result<LoadedData> {
    let mut required = vec!["corpus", "qrels", "queries"];
    if need_anchors {
        required.push("anchors");
    }
    cfg.require_paths(&required)?;
    let norm = cfg.norm_config();
    let corpus = load_corpus(cfg.corpus.as_ref().unwrap(), &norm)?;
    let index = match &cfg.index_snapshot {
        Some(p) if p.exists() => InvertedIndex::load(p)?,
        _ => InvertedIndex::from_corpus(&corpus)?,
    };
    let anchors = if need_anchors {
        load_anchor_pairs(cfg.anchors.as_ref().unwrap(), &norm, &corpus)?
    } else {
        Vec::new()
    };
    let queries = load_queries(cfg.queries.as_ref().unwrap(), &norm, &corpus.vocab)?;
    let qrels = read_qrels(cfg.qrels.as_ref().unwrap())?;
    let embeddings = match &cfg.embeddings {
        Some(p) => Some(load_embeddings(p, &corpus.vocab, cfg.embed_dim, cfg.seed)?),
        None => None,
    };
    Ok(LoadedData {
        corpus,
        index,
        anchors,
        queries,
        qrels,
        embeddings,
    })
}

/// Discriminator warm-up accuracy per fold, written to warmup.tsv.
pub fn cmd_warmup(cfg: &ExperimentConfig) -> Result<()> {
    let data = load_data(cfg, true)?;
    let tcfg = cfg.train_config();
    let inputs = TrainInputs {
        corpus: &data.corpus,
        index: &data.index,
        anchors: &data.anchors,
        queries: &data.queries,
        qrels: &data.qrels,
        embeddings: data.embeddings.as_ref(),
    };
    let stream = prepare_stream(&inputs, &tcfg)?;
    let qids: Vec<String> = data.queries.iter().map(|(q, _)| q.clone()).collect();
    let assignment = kfold_split(&qids, tcfg.folds, tcfg.master_seed);
    fs::create_dir_all(&cfg.out)?;
    let mut rows = String::from("fold\taccuracy\n");
    for fold in 0..tcfg.folds {
        let train_queries: Vec<(String, crate::corpus::TokenSeq)> = data
            .queries
            .iter()
            .zip(&assignment)
            .filter(|(_, f)| **f != fold)
            .map(|((q, s), _)| (q.clone(), s.clone()))
            .collect();
        let allowed = train_queries.iter().map(|(q, _)| q.clone()).collect();
        let restricted = data.qrels.restricted_to(&allowed);
        let (pos, neg) = warmup_sets(&data.corpus, &restricted, &train_queries, &stream, &tcfg);
        let seed = rngutil::stream(tcfg.master_seed, &format!("fold{}-policy", fold)).gen();
        let mut policy =
            PolicyParams::init(data.corpus.vocab.len(), cfg.policy_config(), data.embeddings.as_ref(), seed)?;
        let mut rng = rngutil::stream(tcfg.master_seed, &format!("fold{}-warmup", fold));
        let report = policy.warmup_discriminator(
            &pos,
            &neg,
            tcfg.warmup_epochs.max(1),
            tcfg.warmup_lr,
            &mut rng,
        )?;
        rows.push_str(&format!("{}\t{}\n", fold, report.accuracy));
    }
    let path = cfg.out.join("warmup.tsv");
    fs::write(&path, &rows)?;
    if fs::read_to_string(&path)?.lines().count() != tcfg.folds + 1 {
        return Err(Error::Data("warmup.tsv failed to round trip".into()));
    }
    println!("warmup: report at {}", path.display());
    Ok(())
}

/// Train under the configured mode; writes per-fold checkpoints, the trace
/// CSV, the decision log, the audit log and a per-fold summary.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<()> {
    let data = load_data(cfg, true)?;
    let tcfg = cfg.train_config();
    let inputs = TrainInputs {
        corpus: &data.corpus,
        index: &data.index,
        anchors: &data.anchors,
        queries: &data.queries,
        qrels: &data.qrels,
        embeddings: data.embeddings.as_ref(),
    };
    let outcome = full_train(
        &inputs,
        cfg.train_mode(),
        &tcfg,
        &cfg.ranker_config(),
        &cfg.policy_config(),
    )?;
    write_train_outputs(cfg, &outcome)?;
    for fold in &outcome.folds {
        println!(
            "train fold {}: val ndcg {:.4} -> {:.4} over {} episodes",
            fold.fold, fold.initial_val_ndcg, fold.final_val_ndcg, fold.episodes_run
        );
    }
    Ok(())
}

/// Write (and verify) every artifact of a training run.
pub fn write_train_outputs(cfg: &ExperimentConfig, outcome: &TrainOutcome) -> Result<()> {
    fs::create_dir_all(&cfg.out)?;
    let mut trace = format!("# mode={}\n", cfg.mode);
    let mut rows = Vec::new();
    for fold in &outcome.folds {
        rows.extend(fold.trace.iter().cloned());
    }
    trace.push_str(&trace_to_csv(&rows));
    let trace_path = cfg.out.join("trace.csv");
    fs::write(&trace_path, &trace)?;

    let mut decisions = String::new();
    for fold in &outcome.folds {
        for d in &fold.decisions {
            decisions.push_str(&format!(
                "{}\t{}\t{}\n",
                d.pair_id, d.action, d.prob_select
            ));
        }
    }
    let decisions_path = cfg.out.join("decisions.tsv");
    fs::write(&decisions_path, &decisions)?;

    let mut audit = String::new();
    for fold in &outcome.folds {
        for line in &fold.audit {
            audit.push_str(line);
            audit.push('\n');
        }
    }
    fs::write(cfg.out.join("audit.log"), &audit)?;

    let mut summary = String::from("fold\tinitial_val_ndcg\tfinal_val_ndcg\tepisodes\twarmup_accuracy\n");
    for fold in &outcome.folds {
        summary.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            fold.fold,
            fold.initial_val_ndcg,
            fold.final_val_ndcg,
            fold.episodes_run,
            fold.warmup_accuracy
                .map(|a| a.to_string())
                .unwrap_or_else(|| "NA".into()),
        ));
    }
    fs::write(cfg.out.join("summary.tsv"), &summary)?;

    for fold in &outcome.folds {
        let dir = cfg.out.join(format!("fold{}", fold.fold));
        fs::create_dir_all(&dir)?;
        ckpt::save_params(&dir.join("ranker.ckpt"), &fold.ranker.store)?;
        ckpt::save_params(&dir.join("policy.ckpt"), &fold.policy.store)?;
    }

    // parse-back checks
    read_trace(&trace_path)?;
    read_decisions(&decisions_path)?;
    for fold in &outcome.folds {
        let dir = cfg.out.join(format!("fold{}", fold.fold));
        let mut store = fold.ranker.store.clone();
        ckpt::load_params(&dir.join("ranker.ckpt"), &mut store)?;
        let mut store = fold.policy.store.clone();
        ckpt::load_params(&dir.join("policy.ckpt"), &mut store)?;
    }
    Ok(())
}

/// Parse a trace CSV (comment lines allowed before the header).
pub fn read_trace(path: &Path) -> Result<Vec<(usize, f64, f64, f64)>> {
    let display = path.display().to_string();
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    let mut saw_header = false;
    for (lineno, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.is_empty() {
            continue;
        }
        if !saw_header {
            if line != "batch,selected_frac,reward,val_ndcg" {
                return Err(Error::parse(&display, lineno + 1, "bad trace header"));
            }
            saw_header = true;
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::parse(&display, lineno + 1, "expected 4 columns"));
        }
        let parse_f = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::parse(&display, lineno + 1, format!("bad number {:?}", s)))
        };
        rows.push((
            fields[0]
                .parse()
                .map_err(|_| Error::parse(&display, lineno + 1, "bad batch index"))?,
            parse_f(fields[1])?,
            parse_f(fields[2])?,
            parse_f(fields[3])?,
        ));
    }
    if !saw_header {
        return Err(Error::parse(&display, 1, "missing trace header"));
    }
    Ok(rows)
}

/// Parse a decision log; later rows for the same pair win.
pub fn read_decisions(path: &Path) -> Result<BTreeMap<u64, (u8, f64)>> {
    let display = path.display().to_string();
    let text = fs::read_to_string(path)?;
    let mut map = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::parse(&display, lineno + 1, "expected 3 columns"));
        }
        let pair: u64 = fields[0]
            .parse()
            .map_err(|_| Error::parse(&display, lineno + 1, "bad pair id"))?;
        let action: u8 = fields[1]
            .parse()
            .map_err(|_| Error::parse(&display, lineno + 1, "bad action"))?;
        if action > 1 {
            return Err(Error::parse(&display, lineno + 1, "action must be 0 or 1"));
        }
        let prob: f64 = fields[2]
            .parse()
            .map_err(|_| Error::parse(&display, lineno + 1, "bad probability"))?;
        map.insert(pair, (action, prob));
    }
    Ok(map)
}

/// Evaluate fold checkpoints on their held-out queries: write a TREC run
/// and a report with permutation p-values against an optional baseline.
pub fn cmd_eval(cfg: &ExperimentConfig) -> Result<()> {
    let data = load_data(cfg, false)?;
    let model_dir = cfg
        .model_dir
        .clone()
        .ok_or_else(|| Error::Config("missing required path key model_dir".into()))?;
    let tcfg = cfg.train_config();
    let qids: Vec<String> = data.queries.iter().map(|(q, _)| q.clone()).collect();
    let assignment = kfold_split(&qids, tcfg.folds, tcfg.master_seed);
    let threads = eval_threads();
    let mut lists: Vec<RankedList> = Vec::new();

    for fold in 0..tcfg.folds {
        let ckpt_path = model_dir.join(format!("fold{}", fold)).join("ranker.ckpt");
        if !ckpt_path.exists() {
            return Err(Error::Config(format!(
                "missing checkpoint {}",
                ckpt_path.display()
            )));
        }
        let seed = rngutil::stream(tcfg.master_seed, &format!("fold{}-ranker", fold)).gen();
        let mut ranker = RankerParams::init(
            data.corpus.vocab.len(),
            cfg.ranker_config(),
            data.embeddings.as_ref(),
            seed,
        )?;
        ckpt::load_params(&ckpt_path, &mut ranker.store)?;

        let fusion = if cfg.fuse {
            Some(fit_fold_fusion(cfg, &data, &ranker, &assignment, fold)?)
        } else {
            None
        };

        for ((qid, qseq), fold_of) in data.queries.iter().zip(&assignment) {
            if *fold_of != fold || !data.qrels.has_query(qid) || qseq.is_empty() {
                continue;
            }
            let pool = data.index.retrieve_topk(qseq, tcfg.pool_depth, &tcfg.bm25)?;
            if pool.is_empty() {
                continue;
            }
            let q_grams = ranker.doc_grams(qseq)?;
            let mut entries = Vec::with_capacity(pool.len());
            for (doc_id, bm25_score) in &pool {
                let doc = data.corpus.doc(doc_id).expect("pool docs exist");
                let features = ranker.features_from_grams(&q_grams, &ranker.doc_grams(doc)?)?;
                let score = match &fusion {
                    Some(model) => {
                        let mut row = features;
                        row.push(*bm25_score);
                        model.score(&row)
                    }
                    None => ranker.score_from_features(&features),
                };
                entries.push((doc_id.clone(), score));
            }
            lists.push(RankedList::from_scores(qid, entries)?);
        }
        let _ = threads;
    }
    if lists.is_empty() {
        return Err(Error::Data("no evaluable queries".into()));
    }

    fs::create_dir_all(&cfg.out)?;
    let run_path = cfg.out.join("run.trec");
    write_run(&run_path, &lists, &cfg.mode)?;

    let max_grade = data.qrels.max_grade().max(1);
    let ndcg_mean = mean_metric(&lists, &data.qrels, |l, q| ndcg_at_k(l, q, cfg.reward_k))?;
    let err_mean = mean_metric(&lists, &data.qrels, |l, q| {
        err_at_k(l, q, cfg.reward_k, max_grade)
    })?;

    let (p_ndcg, p_err) = match &cfg.baseline_run {
        Some(base) => {
            let base_lists = read_run(base)?;
            let shared: Vec<(&RankedList, &RankedList)> = lists
                .iter()
                .filter_map(|l| {
                    base_lists
                        .iter()
                        .find(|b| b.query_id == l.query_id)
                        .map(|b| (l, b))
                })
                .collect();
            if shared.len() < 2 {
                return Err(Error::Data(
                    "baseline run shares fewer than 2 queries with this run".into(),
                ));
            }
            let collect = |metric: &dyn Fn(&RankedList) -> Result<f64>| -> Result<(Vec<f64>, Vec<f64>)> {
                let mut ours = Vec::new();
                let mut theirs = Vec::new();
                for (l, b) in &shared {
                    ours.push(metric(l)?);
                    theirs.push(metric(b)?);
                }
                Ok((ours, theirs))
            };
            let (a, b) = collect(&|l| ndcg_at_k(l, &data.qrels, cfg.reward_k))?;
            let mut rng = rngutil::stream(cfg.seed, "permutation-ndcg");
            let p1 = permutation_test(&a, &b, 10_000, &mut rng)?;
            let (a, b) = collect(&|l| err_at_k(l, &data.qrels, cfg.reward_k, max_grade))?;
            let mut rng = rngutil::stream(cfg.seed, "permutation-err");
            let p2 = permutation_test(&a, &b, 10_000, &mut rng)?;
            (format!("{}", p1), format!("{}", p2))
        }
        None => ("NA".into(), "NA".into()),
    };

    let report = format!(
        "metric\tsystem\tmean\tp_vs_baseline\nndcg@{k}\t{m}\t{n}\t{pn}\nerr@{k}\t{m}\t{e}\t{pe}\n",
        k = cfg.reward_k,
        m = cfg.mode,
        n = ndcg_mean,
        e = err_mean,
        pn = p_ndcg,
        pe = p_err,
    );
    let report_path = cfg.out.join("report.tsv");
    fs::write(&report_path, &report)?;

    // parse-back checks
    read_run(&run_path)?;
    if fs::read_to_string(&report_path)?.lines().count() != 3 {
        return Err(Error::Data("report.tsv failed to round trip".into()));
    }
    println!(
        "eval: ndcg@{} {:.4}, err@{} {:.4} over {} queries",
        cfg.reward_k,
        ndcg_mean,
        cfg.reward_k,
        err_mean,
        lists.len()
    );
    Ok(())
}

/// Fit the fold's fusion model (ranker features plus the BM25 base score,
/// base score last) on the fold's training queries.
fn fit_fold_fusion(
    cfg: &ExperimentConfig,
    data: &LoadedData,
    ranker: &RankerParams,
    assignment: &[usize],
    test_fold: usize,
) -> Result<crate::eval::FusionModel> {
    let tcfg = cfg.train_config();
    let nf = ranker.feature_dim() + 1;
    let mut table = FeatureTable::new(nf);
    for ((qid, qseq), fold_of) in data.queries.iter().zip(assignment) {
        if *fold_of == test_fold || !data.qrels.has_query(qid) || qseq.is_empty() {
            continue;
        }
        let pool = data.index.retrieve_topk(qseq, tcfg.pool_depth, &tcfg.bm25)?;
        let q_grams = ranker.doc_grams(qseq)?;
        for (doc_id, bm25_score) in &pool {
            let doc = data.corpus.doc(doc_id).expect("pool docs exist");
            let mut row = ranker.features_from_grams(&q_grams, &ranker.doc_grams(doc)?)?;
            row.push(*bm25_score);
            table.push(qid, doc_id, row)?;
        }
    }
    // restart 0 starts from the base score alone, so the fitted model
    // never scores below BM25 on the training folds
    let mut base_only = vec![0.0; nf];
    base_only[nf - 1] = 1.0;
    let mut rng = rngutil::stream(cfg.seed, &format!("fusion-fold{}", test_fold));
    coordinate_ascent(
        &table,
        &data.qrels,
        cfg.reward_k,
        cfg.restarts.max(1),
        &mut rng,
        &[base_only],
    )
}

/// Reduce a trace CSV to plot-ready (batch, selected_frac, reward) rows.
pub fn cmd_curves(cfg: &ExperimentConfig) -> Result<()> {
    cfg.require_paths(&["trace"])?;
    let rows = read_trace(cfg.trace.as_ref().unwrap())?;
    fs::create_dir_all(&cfg.out)?;
    let mut out = String::from("batch,selected_frac,reward\n");
    for (batch, frac, reward, _) in &rows {
        out.push_str(&format!("{},{},{}\n", batch, frac, reward));
    }
    let path = cfg.out.join("curves.csv");
    fs::write(&path, &out)?;
    if fs::read_to_string(&path)?.lines().count() != rows.len() + 1 {
        return Err(Error::Data("curves.csv failed to round trip".into()));
    }
    println!("curves: {} rows at {}", rows.len(), path.display());
    Ok(())
}

/// Fraction of pair ids on which two decision logs took the same action.
pub fn agreement(a: &Path, b: &Path) -> Result<f64> {
    let da = read_decisions(a)?;
    let db = read_decisions(b)?;
    if da.is_empty() || da.len() != db.len() || da.keys().ne(db.keys()) {
        return Err(Error::Data(
            "decision logs cover different pair id sets".into(),
        ));
    }
    let same = da
        .iter()
        .filter(|(id, (action, _))| db[*id].0 == *action)
        .count();
    Ok(same as f64 / da.len() as f64)
}

pub fn cmd_agreement(cfg: &ExperimentConfig, log_a: &Path, log_b: &Path) -> Result<()> {
    let frac = agreement(log_a, log_b)?;
    fs::create_dir_all(&cfg.out)?;
    let path = cfg.out.join("agreement.txt");
    fs::write(&path, format!("agreement\t{}\n", frac))?;
    let back = fs::read_to_string(&path)?;
    back.trim()
        .split('\t')
        .nth(1)
        .and_then(|v| v.parse::<f64>().ok())
        .ok_or_else(|| Error::Data("agreement.txt failed to round trip".into()))?;
    println!("agreement: {}", frac);
    Ok(())
}

/// Output artifacts of a training run, for callers that need the layout.
pub fn train_artifact_paths(out: &Path, folds: usize) -> Vec<PathBuf> {
    let mut paths = vec![
        out.join("trace.csv"),
        out.join("decisions.tsv"),
        out.join("audit.log"),
        out.join("summary.tsv"),
    ];
    for f in 0..folds {
        paths.push(out.join(format!("fold{}", f)).join("ranker.ckpt"));
        paths.push(out.join(format!("fold{}", f)).join("policy.ckpt"));
    }
    paths
}
