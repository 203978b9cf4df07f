//! Experiment configuration: a flat "key = value" file, overridable by
//! command-line flags whose names match the keys verbatim.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use crate::bm25::Bm25Params;
use crate::corpus::{NormConfig, Stemmer};
use crate::error::{Error, Result};
use crate::policy::PolicyConfig;
use crate::ranker::RankerConfig;
use crate::synth::SynthSpec;
use crate::trainer::{TrainConfig, TrainMode};

/// Selection regime names accepted by the `mode` key.
pub const MODES: [&str; 3] = ["all-anchor", "discriminator-select", "reinfoselect"];

/// Every accepted configuration key, also the exact CLI flag names.
pub const KEYS: [&str; 37] = [
    "corpus",
    "anchors",
    "qrels",
    "queries",
    "embeddings",
    "index_snapshot",
    "model_dir",
    "baseline_run",
    "trace",
    "out",
    "mode",
    "threshold",
    "seed",
    "episode_len",
    "discount",
    "policy_lr",
    "ranker_lr",
    "batch_size",
    "negatives_per_anchor",
    "reward_k",
    "patience",
    "steps_per_batch",
    "max_episodes",
    "warmup_epochs",
    "warmup_lr",
    "warmup_pairs_cap",
    "folds",
    "pool_depth",
    "embed_dim",
    "filters",
    "state_filters",
    "interaction_filters",
    "stemmer",
    "bm25_k1",
    "bm25_b",
    "fuse",
    "restarts",
];

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub corpus: Option<PathBuf>,
    pub anchors: Option<PathBuf>,
    pub qrels: Option<PathBuf>,
    pub queries: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub index_snapshot: Option<PathBuf>,
    /// Directory holding fold checkpoints for evaluation.
    pub model_dir: Option<PathBuf>,
    pub baseline_run: Option<PathBuf>,
    /// Trace CSV consumed by the curves command.
    pub trace: Option<PathBuf>,
    pub out: PathBuf,
    pub mode: String,
    pub threshold: f64,
    pub seed: u64,
    pub episode_len: usize,
    pub discount: f64,
    pub policy_lr: f64,
    pub ranker_lr: f64,
    pub batch_size: usize,
    pub negatives_per_anchor: usize,
    pub reward_k: usize,
    pub patience: usize,
    pub steps_per_batch: usize,
    pub max_episodes: usize,
    pub warmup_epochs: usize,
    pub warmup_lr: f64,
    pub warmup_pairs_cap: usize,
    pub folds: usize,
    pub pool_depth: usize,
    pub embed_dim: usize,
    pub filters: usize,
    pub state_filters: usize,
    pub interaction_filters: usize,
    /// Suffix-stripping stemmer toggle (default off).
    pub stemmer: bool,
    pub bm25_k1: f64,
    pub bm25_b: f64,
    /// Coordinate-ascent fusion with the BM25 base score at eval time.
    pub fuse: bool,
    pub restarts: usize,

    pub synth: SynthSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let r = RankerConfig::default();
        let p = PolicyConfig::default();
        ExperimentConfig {
            corpus: None,
            anchors: None,
            qrels: None,
            queries: None,
            embeddings: None,
            index_snapshot: None,
            model_dir: None,
            baseline_run: None,
            trace: None,
            out: PathBuf::from("out"),
            mode: "reinfoselect".into(),
            threshold: 0.5,
            seed: 1,
            episode_len: t.episode_len,
            discount: t.discount,
            policy_lr: t.policy_lr,
            ranker_lr: t.ranker_lr,
            batch_size: t.batch_size,
            negatives_per_anchor: t.negatives_per_anchor,
            reward_k: t.reward_k,
            patience: t.patience,
            steps_per_batch: t.steps_per_batch,
            max_episodes: t.max_episodes,
            warmup_epochs: t.warmup_epochs,
            warmup_lr: t.warmup_lr,
            warmup_pairs_cap: t.warmup_pairs_cap,
            folds: t.folds,
            pool_depth: t.pool_depth,
            embed_dim: r.embed_dim,
            filters: r.filters,
            state_filters: p.state_filters,
            interaction_filters: p.interaction_filters,
            stemmer: false,
            bm25_k1: 1.2,
            bm25_b: 0.75,
            fuse: false,
            restarts: 5,
            synth: SynthSpec::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parse a flat "key = value" file; '#' starts a comment.
    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        cfg.merge_file(path)?;
        Ok(cfg)
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<()> {
        let display = path.display().to_string();
        let text = std::fs::read_to_string(path)?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::parse(&display, lineno + 1, "expected key = value")
            })?;
            self.apply(key.trim(), value.trim())
                .map_err(|e| Error::parse(&display, lineno + 1, e.to_string()))?;
        }
        Ok(())
    }

    /// Apply one key/value pair (from the file or a CLI flag).
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("bad value {:?} for {}", value, key)))
        }
        fn flag(key: &str, value: &str) -> Result<bool> {
            match value {
                "true" | "on" | "1" => Ok(true),
                "false" | "off" | "0" => Ok(false),
                _ => Err(Error::Config(format!("bad value {:?} for {}", value, key))),
            }
        }
        match key {
            "corpus" => self.corpus = Some(PathBuf::from(value)),
            "anchors" => self.anchors = Some(PathBuf::from(value)),
            "qrels" => self.qrels = Some(PathBuf::from(value)),
            "queries" => self.queries = Some(PathBuf::from(value)),
            "embeddings" => self.embeddings = Some(PathBuf::from(value)),
            "index_snapshot" => self.index_snapshot = Some(PathBuf::from(value)),
            "model_dir" => self.model_dir = Some(PathBuf::from(value)),
            "baseline_run" => self.baseline_run = Some(PathBuf::from(value)),
            "trace" => self.trace = Some(PathBuf::from(value)),
            "out" => self.out = PathBuf::from(value),
            "mode" => {
                if !MODES.contains(&value) {
                    return Err(Error::Config(format!(
                        "mode must be one of {:?}, got {:?}",
                        MODES, value
                    )));
                }
                self.mode = value.to_string();
            }
            "threshold" => self.threshold = num(key, value)?,
            "seed" => {
                self.seed = num(key, value)?;
                self.synth.seed = self.seed;
            }
            "episode_len" => self.episode_len = num(key, value)?,
            "discount" => self.discount = num(key, value)?,
            "policy_lr" => self.policy_lr = num(key, value)?,
            "ranker_lr" => self.ranker_lr = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "negatives_per_anchor" => self.negatives_per_anchor = num(key, value)?,
            "reward_k" => self.reward_k = num(key, value)?,
            "patience" => self.patience = num(key, value)?,
            "steps_per_batch" => self.steps_per_batch = num(key, value)?,
            "max_episodes" => self.max_episodes = num(key, value)?,
            "warmup_epochs" => self.warmup_epochs = num(key, value)?,
            "warmup_lr" => self.warmup_lr = num(key, value)?,
            "warmup_pairs_cap" => self.warmup_pairs_cap = num(key, value)?,
            "folds" => self.folds = num(key, value)?,
            "pool_depth" => self.pool_depth = num(key, value)?,
            "embed_dim" => self.embed_dim = num(key, value)?,
            "filters" => self.filters = num(key, value)?,
            "state_filters" => self.state_filters = num(key, value)?,
            "interaction_filters" => self.interaction_filters = num(key, value)?,
            "stemmer" => self.stemmer = flag(key, value)?,
            "bm25_k1" => self.bm25_k1 = num(key, value)?,
            "bm25_b" => self.bm25_b = num(key, value)?,
            "fuse" => self.fuse = flag(key, value)?,
            "restarts" => self.restarts = num(key, value)?,
            "synth_topics" => self.synth.topics = num(key, value)?,
            "synth_docs_per_topic" => self.synth.docs_per_topic = num(key, value)?,
            "synth_vocab" => self.synth.vocab_size = num(key, value)?,
            "synth_anchors" => self.synth.anchors = num(key, value)?,
            "synth_noise" => self.synth.noise_rate = num(key, value)?,
            "synth_queries" => self.synth.queries = num(key, value)?,
            other => {
                return Err(Error::Config(format!("unknown config key {:?}", other)));
            }
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            episode_len: self.episode_len,
            discount: self.discount,
            policy_lr: self.policy_lr,
            ranker_lr: self.ranker_lr,
            batch_size: self.batch_size,
            negatives_per_anchor: self.negatives_per_anchor,
            reward_k: self.reward_k,
            patience: self.patience,
            master_seed: self.seed,
            steps_per_batch: self.steps_per_batch,
            max_episodes: self.max_episodes,
            warmup_epochs: self.warmup_epochs,
            warmup_lr: self.warmup_lr,
            warmup_pairs_cap: self.warmup_pairs_cap,
            folds: self.folds,
            pool_depth: self.pool_depth,
            eval_threads: eval_threads(),
            bm25: Bm25Params {
                k1: self.bm25_k1,
                b: self.bm25_b,
            },
        }
    }

    pub fn ranker_config(&self) -> RankerConfig {
        RankerConfig {
            embed_dim: self.embed_dim,
            filters: self.filters,
            ..RankerConfig::default()
        }
    }

    pub fn policy_config(&self) -> PolicyConfig {
        PolicyConfig {
            embed_dim: self.embed_dim,
            state_filters: self.state_filters,
            interaction_filters: self.interaction_filters,
            ..PolicyConfig::default()
        }
    }

    pub fn norm_config(&self) -> NormConfig {
        NormConfig {
            stemmer: if self.stemmer {
                Stemmer::SuffixStripper
            } else {
                Stemmer::None
            },
            ..NormConfig::default()
        }
    }

    pub fn train_mode(&self) -> TrainMode {
        match self.mode.as_str() {
            "all-anchor" => TrainMode::AllAnchor,
            "discriminator-select" => TrainMode::DiscriminatorSelect {
                threshold: self.threshold,
            },
            _ => TrainMode::ReInfoSelect,
        }
    }

    /// Error unless every one of the named path keys is set and exists.
    pub fn require_paths(&self, keys: &[&str]) -> Result<()> {
        let lookup: [(&str, &Option<PathBuf>); 9] = [
            ("corpus", &self.corpus),
            ("anchors", &self.anchors),
            ("qrels", &self.qrels),
            ("queries", &self.queries),
            ("embeddings", &self.embeddings),
            ("index_snapshot", &self.index_snapshot),
            ("model_dir", &self.model_dir),
            ("baseline_run", &self.baseline_run),
            ("trace", &self.trace),
        ];
        let wanted: HashSet<&str> = keys.iter().copied().collect();
        for (name, value) in lookup {
            if !wanted.contains(name) {
                continue;
            }
            match value {
                None => {
                    return Err(Error::Config(format!("missing required path key {}", name)))
                }
                Some(p) if !p.exists() => {
                    return Err(Error::Config(format!(
                        "{} path {} does not exist",
                        name,
                        p.display()
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Evaluation parallelism cap from the environment, default 1.
pub fn eval_threads() -> usize {
    std::env::var("RANKER_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|v| *v >= 1)
        .unwrap_or(1)
}
