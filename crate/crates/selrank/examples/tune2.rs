// Does all-anchor hinge training improve pool NDCG at various noise rates?
use selrank::bm25::InvertedIndex;
use selrank::corpus::{load_anchor_pairs, load_corpus, load_queries, read_qrels, NormConfig};
use selrank::policy::PolicyConfig;
use selrank::ranker::RankerConfig;
use selrank::synth::{generate_synth, SynthSpec};
use selrank::trainer::{prepare_stream, train_fold, TrainConfig, TrainInputs, TrainMode};
use selrank::eval::kfold_split;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(1);
    let noise: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(0.0);
    let lr: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(1e-3);
    let episodes: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(10);

    let dir = std::env::temp_dir().join(format!("tune2-{}-{}", seed, noise));
    let spec = SynthSpec { topics: 5, docs_per_topic: 400, vocab_size: 600, anchors: 200, noise_rate: noise, queries: 50, seed };
    let paths = generate_synth(&spec, &dir).unwrap();
    let norm = NormConfig::default();
    let corpus = load_corpus(&paths.docs, &norm).unwrap();
    let index = InvertedIndex::from_corpus(&corpus).unwrap();
    let anchors = load_anchor_pairs(&paths.anchors, &norm, &corpus).unwrap();
    let queries = load_queries(&paths.queries, &norm, &corpus.vocab).unwrap();
    let qrels = read_qrels(&paths.qrels).unwrap();
    let cfg = TrainConfig { master_seed: seed, warmup_epochs: 0, max_episodes: episodes, patience: 100, ranker_lr: lr, ..TrainConfig::default() };
    let rc = RankerConfig { embed_dim: 16, filters: 8, ..RankerConfig::default() };
    let pc = PolicyConfig { embed_dim: 16, state_filters: 8, interaction_filters: 8, ..PolicyConfig::default() };
    let inputs = TrainInputs { corpus: &corpus, index: &index, anchors: &anchors, queries: &queries, qrels: &qrels, embeddings: None };
    let stream = prepare_stream(&inputs, &cfg).unwrap();
    let qids: Vec<String> = queries.iter().map(|(q, _)| q.clone()).collect();
    let assignment = kfold_split(&qids, cfg.folds, cfg.master_seed);
    let out = train_fold(&inputs, &stream, &assignment, 0, TrainMode::AllAnchor, &cfg, &rc, &pc).unwrap();
    let traj: Vec<String> = out.trace.iter().step_by(4).map(|r| format!("{:.4}", r.val_ndcg)).collect();
    println!("seed={} noise={} lr={} : {:.4} -> {:.4} | {}", seed, noise, lr, out.initial_val_ndcg, out.final_val_ndcg, traj.join(" "));
}
