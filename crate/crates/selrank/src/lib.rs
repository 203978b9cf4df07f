//! Weakly supervised learning-to-rank toolkit.
//!
//! Trains a kernel-pooling neural ranker on noisy anchor-document pairs.
//! A small policy network decides, pair by pair, whether each anchor is
//! worth training on; the policy is trained with REINFORCE, rewarded by
//! the change in validation NDCG the selected pairs produce. BM25 over an
//! inverted index supplies candidate pools and pseudo-negative documents,
//! and a coordinate-ascent fusion step combines the learned features with
//! the base retrieval score.

pub mod autodiff;
pub mod baselines;
pub mod bm25;
pub mod ckpt;
pub mod config;
pub mod corpus;
pub mod driver;
pub mod error;
pub mod eval;
pub mod policy;
pub mod ranker;
pub mod rngutil;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
