use selrank::bm25::InvertedIndex;
use selrank::corpus::{load_anchor_pairs, load_corpus, load_queries, read_qrels, NormConfig};
use selrank::eval::kfold_split;
use selrank::policy::PolicyConfig;
use selrank::ranker::RankerConfig;
use selrank::synth::{generate_synth, SynthSpec};
use selrank::trainer::{prepare_stream, train_fold, TrainConfig, TrainInputs, TrainMode};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let corpus_seed: u64 = args.get(7).map(|s| s.parse().unwrap()).unwrap_or(11);
    let seed: u64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(1);
    let mode_name = args.get(2).map(|s| s.as_str()).unwrap_or("reinfo");
    let warmup: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(0);
    let max_episodes: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(12);

    let dir = std::env::temp_dir().join(format!("tune-corpus-{}", corpus_seed));
    let spec = SynthSpec {
        topics: 5,
        docs_per_topic: 400,
        vocab_size: 600,
        anchors: 200,
        noise_rate: 0.4,
        queries: 50,
        seed: corpus_seed,
    };
    let t0 = Instant::now();
    let paths = generate_synth(&spec, &dir).unwrap();
    let norm = NormConfig::default();
    let corpus = load_corpus(&paths.docs, &norm).unwrap();
    let index = InvertedIndex::from_corpus(&corpus).unwrap();
    let anchors = load_anchor_pairs(&paths.anchors, &norm, &corpus).unwrap();
    let queries = load_queries(&paths.queries, &norm, &corpus.vocab).unwrap();
    let qrels = read_qrels(&paths.qrels).unwrap();
    eprintln!("data ready in {:?}", t0.elapsed());

    let policy_lr: f64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(1e-3);
    let patience: usize = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(3);
    let ranker_lr: f64 = args.get(8).map(|s| s.parse().unwrap()).unwrap_or(1e-3);
    let cfg = TrainConfig {
        master_seed: seed,
        warmup_epochs: warmup,
        max_episodes,
        policy_lr,
        patience,
        ranker_lr,
        ..TrainConfig::default()
    };
    // warmup shares policy_lr; experiments that need a hotter warm-up pass it via WARMUP_LR
    let _ = &cfg;
    let ranker_cfg = RankerConfig { embed_dim: 16, filters: 8, ..RankerConfig::default() };
    let policy_cfg = PolicyConfig { embed_dim: 16, state_filters: 8, interaction_filters: 8, ..PolicyConfig::default() };
    let inputs = TrainInputs {
        corpus: &corpus, index: &index, anchors: &anchors,
        queries: &queries, qrels: &qrels, embeddings: None,
    };
    let stream = prepare_stream(&inputs, &cfg).unwrap();
    let qids: Vec<String> = queries.iter().map(|(q, _)| q.clone()).collect();
    let assignment = kfold_split(&qids, cfg.folds, cfg.master_seed);
    let mode = match mode_name {
        "all" => TrainMode::AllAnchor,
        "disc" => TrainMode::DiscriminatorSelect { threshold: 0.5 },
        _ => TrainMode::ReInfoSelect,
    };
    let t1 = Instant::now();
    let out = train_fold(&inputs, &stream, &assignment, 0, mode, &cfg, &ranker_cfg, &policy_cfg).unwrap();
    eprintln!("fold trained in {:?} ({} episodes)", t1.elapsed(), out.episodes_run);
    let n = out.trace.len();
    let head = (n as f64 * 0.2).ceil() as usize;
    let first: f64 = out.trace[..head].iter().map(|r| r.selected_frac).sum::<f64>() / head as f64;
    let last: f64 = out.trace[n - head..].iter().map(|r| r.selected_frac).sum::<f64>() / head as f64;
    println!(
        "seed={} mode={} warmup={} episodes={} batches={} first20={:.3} last20={:.3} ndcg {:.4} -> {:.4} warmacc={:?}",
        seed, mode_name, warmup, out.episodes_run, n, first, last,
        out.initial_val_ndcg, out.final_val_ndcg, out.warmup_accuracy
    );
    let fracs: Vec<String> = out.trace.iter().map(|r| format!("{:.2}", r.selected_frac)).collect();
    eprintln!("fracs: {}", fracs.join(" "));
    let rewards: Vec<String> = out.trace.iter().map(|r| format!("{:+.4}", r.reward)).collect();
    eprintln!("rewards: {}", rewards.join(" "));
}
