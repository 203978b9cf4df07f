//! Comparison training regimes: all-anchor (no filtering) and fixed
//! discriminator selection. Both consume the anchor stream in the same
//! seeded order as the reinforced selector, so runs pair off cleanly.

use crate::error::Result;
use crate::policy::PolicyConfig;
use crate::ranker::{RankerConfig, RankerParams};
use crate::trainer::{full_train, TrainConfig, TrainInputs, TrainMode, TrainOutcome};

/// Train on every anchor-document pair with no selection and no policy
/// updates. With no anchors at all, the ranker is returned at its
/// initialization.
pub fn train_all_anchor(
    inputs: &TrainInputs,
    cfg: &TrainConfig,
    ranker_cfg: &RankerConfig,
    policy_cfg: &PolicyConfig,
) -> Result<TrainOutcome> {
    if inputs.anchors.is_empty() {
        return untrained(inputs, cfg, ranker_cfg, policy_cfg);
    }
    full_train(inputs, TrainMode::AllAnchor, cfg, ranker_cfg, policy_cfg)
}

/// Warm up the discriminator, keep anchors whose selection probability
/// clears `threshold`, then train the ranker on the kept set only.
pub fn train_discriminator_select(
    inputs: &TrainInputs,
    cfg: &TrainConfig,
    ranker_cfg: &RankerConfig,
    policy_cfg: &PolicyConfig,
    threshold: f64,
) -> Result<TrainOutcome> {
    full_train(
        inputs,
        TrainMode::DiscriminatorSelect { threshold },
        cfg,
        ranker_cfg,
        policy_cfg,
    )
}

fn untrained(
    inputs: &TrainInputs,
    cfg: &TrainConfig,
    ranker_cfg: &RankerConfig,
    policy_cfg: &PolicyConfig,
) -> Result<TrainOutcome> {
    use crate::policy::PolicyParams;
    use crate::rngutil;
    use rand::Rng;
    let vocab = inputs.corpus.vocab.len();
    let mut folds = Vec::new();
    for fold in 0..cfg.folds {
        let seed_tag = |what: &str| -> u64 {
            rngutil::stream(cfg.master_seed, &format!("fold{}-{}", fold, what)).gen()
        };
        folds.push(crate::trainer::FoldOutcome {
            fold,
            ranker: RankerParams::init(vocab, ranker_cfg.clone(), None, seed_tag("ranker"))?,
            policy: PolicyParams::init(vocab, policy_cfg.clone(), None, seed_tag("policy"))?,
            trace: Vec::new(),
            decisions: Vec::new(),
            final_val_ndcg: 0.0,
            initial_val_ndcg: 0.0,
            warmup_accuracy: None,
            episodes_run: 0,
            audit: Vec::new(),
        });
    }
    let qids: Vec<String> = inputs.queries.iter().map(|(q, _)| q.clone()).collect();
    let assignment = crate::eval::kfold_split(&qids, cfg.folds, cfg.master_seed);
    Ok(TrainOutcome { folds, assignment })
}
