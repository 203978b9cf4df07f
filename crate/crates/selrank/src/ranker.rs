//! Kernel-pooling neural ranker: n-gram convolutions over word embeddings,
//! cross translation matrices, Gaussian kernel features and a tanh ranking
//! layer, trained with a pairwise hinge loss.

use std::collections::HashMap;

use rand::Rng;

use crate::autodiff::{
    conv1d_grams_forward, cosine_forward, kernel_pool_forward, KernelConfig, ParamId, ParamStore,
    Tape, Tensor, Var,
};
use crate::corpus::{EmbeddingTable, TokenSeq};
use crate::error::{Error, Result};
use crate::rngutil;

/// Architecture constants for one Conv-KNRM feature stack.
#[derive(Debug, Clone)]
pub struct RankerConfig {
    pub embed_dim: usize,
    pub filters: usize,
    pub gram_widths: Vec<usize>,
    pub kernels: KernelConfig,
}

impl Default for RankerConfig {
    fn default() -> Self {
        RankerConfig {
            embed_dim: 300,
            filters: 128,
            gram_widths: vec![1, 2, 3],
            kernels: KernelConfig::standard(),
        }
    }
}

impl RankerConfig {
    /// 9 translation matrices x K kernels with the default widths.
    pub fn feature_dim(&self) -> usize {
        self.gram_widths.len() * self.gram_widths.len() * self.kernels.count()
    }
}

/// One anchor with its pseudo-positive and pseudo-negative documents.
#[derive(Debug, Clone)]
pub struct TrainingPair {
    pub anchor: TokenSeq,
    pub positive: TokenSeq,
    pub negative: TokenSeq,
}

impl TrainingPair {
    fn validate(&self) -> Result<()> {
        if self.anchor.is_empty() || self.positive.is_empty() || self.negative.is_empty() {
            return Err(Error::Data(format!(
                "training pair for anchor {} has an empty side",
                self.anchor.source_id
            )));
        }
        Ok(())
    }
}

/// Embedding + per-width convolution banks feeding kernel pooling.
/// The ranker owns one; the selection policy owns an independent one for
/// its interaction state.
#[derive(Debug, Clone)]
pub(crate) struct FeatureStack {
    pub embedding: ParamId,
    pub filters: Vec<ParamId>,
    pub biases: Vec<ParamId>,
    pub widths: Vec<usize>,
    pub kernels: KernelConfig,
}

impl FeatureStack {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        vocab_size: usize,
        dim: usize,
        n_filters: usize,
        widths: &[usize],
        kernels: &KernelConfig,
        table: Option<&EmbeddingTable>,
        seed: u64,
    ) -> Result<Self> {
        let matrix = match table {
            Some(t) => {
                if t.dim() != dim || t.vocab_size() != vocab_size {
                    return Err(Error::Shape(format!(
                        "embedding table {}x{} does not match vocab {} dim {}",
                        t.vocab_size(),
                        t.dim(),
                        vocab_size,
                        dim
                    )));
                }
                t.matrix.clone()
            }
            None => {
                crate::corpus::random_embedding(vocab_size, dim, seed, &format!("{}-embed", prefix))
            }
        };
        let embedding = store.add(&format!("{}.embedding", prefix), matrix);
        let mut rng = rngutil::stream(seed, &format!("{}-filters", prefix));
        let mut filters = Vec::new();
        let mut biases = Vec::new();
        for h in widths {
            let mut w = Tensor::zeros(&[h * dim, n_filters]);
            for v in w.data_mut() {
                *v = rng.gen_range(-0.1..0.1);
            }
            filters.push(store.add(&format!("{}.conv{}.weight", prefix, h), w));
            biases.push(store.add(
                &format!("{}.conv{}.bias", prefix, h),
                Tensor::zeros(&[n_filters]),
            ));
        }
        Ok(FeatureStack {
            embedding,
            filters,
            biases,
            widths: widths.to_vec(),
            kernels: kernels.clone(),
        })
    }

    /// Stack that reuses an embedding table already registered in `store`.
    pub fn init_shared_embedding(
        store: &mut ParamStore,
        prefix: &str,
        embedding: ParamId,
        n_filters: usize,
        widths: &[usize],
        kernels: &KernelConfig,
        seed: u64,
    ) -> Self {
        let dim = store.value(embedding).cols();
        let mut rng = rngutil::stream(seed, &format!("{}-filters", prefix));
        let mut filters = Vec::new();
        let mut biases = Vec::new();
        for h in widths {
            let mut w = Tensor::zeros(&[h * dim, n_filters]);
            for v in w.data_mut() {
                *v = rng.gen_range(-0.1..0.1);
            }
            filters.push(store.add(&format!("{}.conv{}.weight", prefix, h), w));
            biases.push(store.add(
                &format!("{}.conv{}.bias", prefix, h),
                Tensor::zeros(&[n_filters]),
            ));
        }
        FeatureStack {
            embedding,
            filters,
            biases,
            widths: widths.to_vec(),
            kernels: kernels.clone(),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.widths.len() * self.widths.len() * self.kernels.count()
    }

    /// Per-width gram embeddings of a sequence (frozen parameters).
    pub fn grams(&self, store: &ParamStore, seq: &TokenSeq) -> Result<Vec<Tensor>> {
        if seq.is_empty() {
            return Err(Error::Data(format!(
                "cannot encode empty sequence {}",
                seq.source_id
            )));
        }
        let table = store.value(self.embedding);
        let dim = table.cols();
        let mut rows = Vec::with_capacity(seq.len() * dim);
        for t in &seq.tokens {
            rows.extend_from_slice(table.row(*t as usize));
        }
        let e = Tensor::from_vec(&[seq.len(), dim], rows)?;
        self.widths
            .iter()
            .zip(self.filters.iter().zip(&self.biases))
            .map(|(h, (f, b))| conv1d_grams_forward(&e, store.value(*f), store.value(*b), *h))
            .collect()
    }

    /// Kernel features from precomputed gram embeddings, concatenated with
    /// the query width outermost, document width next, kernel index last.
    pub fn features_from_grams(&self, q_grams: &[Tensor], d_grams: &[Tensor]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.feature_dim());
        for gq in q_grams {
            for gd in d_grams {
                let m = cosine_forward(gq, gd)?;
                let phi = kernel_pool_forward(&m, &self.kernels)?;
                out.extend_from_slice(phi.data());
            }
        }
        Ok(out)
    }

    /// Frozen-parameter feature vector for a (query, document) pair.
    pub fn features(&self, store: &ParamStore, q: &TokenSeq, d: &TokenSeq) -> Result<Vec<f64>> {
        let qg = self.grams(store, q)?;
        let dg = self.grams(store, d)?;
        self.features_from_grams(&qg, &dg)
    }

    /// Tape-path gram embeddings, cached per (tokens, width) so repeated
    /// sequences in one batch share nodes.
    pub fn grams_traced(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        seq: &TokenSeq,
        cache: &mut GramCache,
    ) -> Result<Vec<Var>> {
        if seq.is_empty() {
            return Err(Error::Data(format!(
                "cannot encode empty sequence {}",
                seq.source_id
            )));
        }
        let mut out = Vec::with_capacity(self.widths.len());
        for (i, h) in self.widths.iter().enumerate() {
            let key = (self.filters[i], seq.tokens.clone());
            if let Some(v) = cache.grams.get(&key) {
                out.push(*v);
                continue;
            }
            let ekey = (self.embedding, seq.tokens.clone());
            let e = match cache.embeds.get(&ekey) {
                Some(v) => *v,
                None => {
                    let v = tape.embed_rows(store, self.embedding, &seq.tokens)?;
                    cache.embeds.insert(ekey, v);
                    v
                }
            };
            let filters = cache.param(tape, store, self.filters[i]);
            let bias = cache.param(tape, store, self.biases[i]);
            let g = tape.conv1d_grams(e, filters, bias, *h)?;
            cache.grams.insert(key, g);
            out.push(g);
        }
        Ok(out)
    }

    /// Tape-path feature vector (a 1-d Var of length `feature_dim`).
    pub fn features_traced(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        q: &TokenSeq,
        d: &TokenSeq,
        cache: &mut GramCache,
    ) -> Result<Var> {
        let qg = self.grams_traced(tape, store, q, cache)?;
        let dg = self.grams_traced(tape, store, d, cache)?;
        let mut parts = Vec::with_capacity(qg.len() * dg.len());
        for gq in &qg {
            for gd in &dg {
                let m = tape.cosine_matrix(*gq, *gd)?;
                parts.push(tape.kernel_pool(m, &self.kernels)?);
            }
        }
        tape.concat(&parts)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.embedding];
        ids.extend(&self.filters);
        ids.extend(&self.biases);
        ids
    }
}

/// Node cache for one tape: embeddings, gram outputs and parameter leaves.
#[derive(Default)]
pub(crate) struct GramCache {
    embeds: HashMap<(ParamId, Vec<u32>), Var>,
    grams: HashMap<(ParamId, Vec<u32>), Var>,
    params: HashMap<ParamId, Var>,
}

impl GramCache {
    pub fn param(&mut self, tape: &mut Tape, store: &ParamStore, id: ParamId) -> Var {
        match self.params.get(&id) {
            Some(v) => *v,
            None => {
                let v = tape.param(store, id);
                self.params.insert(id, v);
                v
            }
        }
    }
}

/// Full ranker: feature stack plus the tanh ranking layer.
#[derive(Debug, Clone)]
pub struct RankerParams {
    pub store: ParamStore,
    stack: FeatureStack,
    w_out: ParamId,
    b_out: ParamId,
    pub config: RankerConfig,
}

impl RankerParams {
    pub fn init(
        vocab_size: usize,
        config: RankerConfig,
        table: Option<&EmbeddingTable>,
        seed: u64,
    ) -> Result<Self> {
        let mut store = ParamStore::new();
        let stack = FeatureStack::init(
            &mut store,
            "ranker",
            vocab_size,
            config.embed_dim,
            config.filters,
            &config.gram_widths,
            &config.kernels,
            table,
            seed,
        )?;
        let fd = stack.feature_dim();
        // kernel features are log-scale sums, so the ranking layer starts
        // at zero to keep the tanh out of its saturated region
        let w_out = store.add("ranker.out.weight", Tensor::zeros(&[1, fd]));
        let b_out = store.add("ranker.out.bias", Tensor::vector(vec![0.0]));
        Ok(RankerParams {
            store,
            stack,
            w_out,
            b_out,
            config,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.stack.feature_dim()
    }

    /// Per-width gram embeddings of a document, reusable across queries
    /// while parameters are frozen.
    pub fn doc_grams(&self, d: &TokenSeq) -> Result<Vec<Tensor>> {
        self.stack.grams(&self.store, d)
    }

    /// Kernel features of a (query, document) pair.
    pub fn features(&self, q: &TokenSeq, d: &TokenSeq) -> Result<Vec<f64>> {
        self.stack.features(&self.store, q, d)
    }

    pub fn features_from_grams(&self, q_grams: &[Tensor], d_grams: &[Tensor]) -> Result<Vec<f64>> {
        self.stack.features_from_grams(q_grams, d_grams)
    }

    pub fn score_from_features(&self, features: &[f64]) -> f64 {
        let w = self.store.value(self.w_out);
        let b = self.store.value(self.b_out).data()[0];
        let dot: f64 = w.data().iter().zip(features).map(|(wi, fi)| wi * fi).sum();
        (dot + b).tanh()
    }

    /// Ranking score `tanh(w . features + b)`, strictly inside (-1, 1).
    pub fn score(&self, q: &TokenSeq, d: &TokenSeq) -> Result<f64> {
        Ok(self.score_from_features(&self.features(q, d)?))
    }

    fn score_traced(
        &self,
        tape: &mut Tape,
        q: &TokenSeq,
        d: &TokenSeq,
        cache: &mut GramCache,
    ) -> Result<Var> {
        let phi = self.stack.features_traced(tape, &self.store, q, d, cache)?;
        let w = cache.param(tape, &self.store, self.w_out);
        let b = cache.param(tape, &self.store, self.b_out);
        let lin = tape.affine(phi, w, b)?;
        let scalar = tape.sum_all(lin);
        Ok(tape.tanh(scalar))
    }

    /// Build the batch hinge loss on a fresh tape. Exposed so gradient
    /// tests can difference the same scalar the trainer optimizes.
    pub fn batch_loss_tape(&self, batch: &[TrainingPair]) -> Result<(Tape, Var)> {
        if batch.is_empty() {
            return Err(Error::Data("empty training batch".into()));
        }
        let mut tape = Tape::new(&self.store);
        let mut cache = GramCache::default();
        let mut terms = Vec::with_capacity(batch.len());
        for pair in batch {
            pair.validate()?;
            let pos = self.score_traced(&mut tape, &pair.anchor, &pair.positive, &mut cache)?;
            let neg = self.score_traced(&mut tape, &pair.anchor, &pair.negative, &mut cache)?;
            terms.push(tape.hinge(pos, neg)?);
        }
        let loss = tape.sum_scalars(&terms)?;
        Ok((tape, loss))
    }

    /// Adam's per-coordinate steps are sign-scaled, so the ranking layer,
    /// whose inputs are log-scale kernel features two orders of magnitude
    /// larger than the rest of the network's activations, takes steps
    /// shrunk by the same factor to keep the tanh logit from racing into
    /// saturation.
    const OUT_LR_SCALE: f64 = 0.01;

    /// One pairwise-hinge gradient step over the batch; returns the
    /// pre-step loss.
    pub fn train_step(&mut self, batch: &[TrainingPair], lr: f64) -> Result<f64> {
        let (tape, loss) = self.batch_loss_tape(batch)?;
        let loss_value = tape.value(loss).as_scalar()?;
        if !loss_value.is_finite() {
            return Err(Error::NonFinite("batch loss".into()));
        }
        tape.backward(loss, &mut self.store)?;
        for id in self.stack.param_ids() {
            self.store.adam_step(id, lr)?;
        }
        self.store.adam_step(self.w_out, lr * Self::OUT_LR_SCALE)?;
        self.store.adam_step(self.b_out, lr * Self::OUT_LR_SCALE)?;
        Ok(loss_value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> RankerConfig {
        RankerConfig {
            embed_dim: 6,
            filters: 4,
            ..RankerConfig::default()
        }
    }

    fn seq(tokens: &[u32]) -> TokenSeq {
        TokenSeq::new(tokens.to_vec(), "t")
    }

    #[test]
    fn feature_vector_has_fixed_length_189() {
        let ranker = RankerParams::init(12, small_config(), None, 7).unwrap();
        let f = ranker.features(&seq(&[2, 3]), &seq(&[4, 5, 6, 7])).unwrap();
        assert_eq!(f.len(), 189);
        assert_eq!(ranker.feature_dim(), 3 * 3 * 21);
    }

    #[test]
    fn empty_input_is_hard_error() {
        let ranker = RankerParams::init(12, small_config(), None, 7).unwrap();
        assert!(ranker.features(&seq(&[]), &seq(&[2])).is_err());
        assert!(ranker.score(&seq(&[2]), &seq(&[])).is_err());
    }

    #[test]
    fn zero_output_layer_scores_zero_and_range_is_open_unit() {
        let mut ranker = RankerParams::init(12, small_config(), None, 7).unwrap();
        let w = ranker.w_out;
        let zeros = Tensor::zeros(&[1, ranker.feature_dim()]);
        ranker.store.set_value(w, zeros).unwrap();
        let s = ranker.score(&seq(&[2, 3]), &seq(&[4, 5])).unwrap();
        assert_eq!(s, 0.0);
        let ranker = RankerParams::init(12, small_config(), None, 9).unwrap();
        for d in 2..8u32 {
            let s = ranker.score(&seq(&[2, 3]), &seq(&[d, d + 1])).unwrap();
            assert!(s > -1.0 && s < 1.0);
        }
    }

    #[test]
    fn frozen_score_matches_recomposed_dense_over_features() {
        let ranker = RankerParams::init(14, small_config(), None, 3).unwrap();
        let q = seq(&[2, 5, 9]);
        let d = seq(&[3, 4, 10, 11]);
        let phi = ranker.features(&q, &d).unwrap();
        let w = ranker.store.value(ranker.w_out);
        let b = ranker.store.value(ranker.b_out).data()[0];
        let recomposed = (phi.iter().zip(w.data()).map(|(f, w)| f * w).sum::<f64>() + b).tanh();
        let direct = ranker.score(&q, &d).unwrap();
        assert!((recomposed - direct).abs() < 1e-15);
    }

    #[test]
    fn traced_score_equals_frozen_score() {
        let ranker = RankerParams::init(14, small_config(), None, 3).unwrap();
        let q = seq(&[2, 5]);
        let d = seq(&[3, 4, 10]);
        let mut tape = Tape::new(&ranker.store);
        let mut cache = GramCache::default();
        let traced = ranker.score_traced(&mut tape, &q, &d, &mut cache).unwrap();
        let frozen = ranker.score(&q, &d).unwrap();
        assert_eq!(tape.value(traced).as_scalar().unwrap(), frozen);
    }

    #[test]
    fn permuting_document_tokens_leaves_unigram_features_unchanged() {
        let ranker = RankerParams::init(16, small_config(), None, 5).unwrap();
        let q = seq(&[2, 3]);
        let d1 = seq(&[4, 5, 6, 7]);
        let d2 = seq(&[7, 4, 6, 5]);
        let f1 = ranker.features(&q, &d1).unwrap();
        let f2 = ranker.features(&q, &d2).unwrap();
        // (h_q=1, h_d=1) block occupies the first K entries
        let k = ranker.config.kernels.count();
        for i in 0..k {
            assert!(
                (f1[i] - f2[i]).abs() < 1e-12,
                "kernel {} changed under permutation",
                i
            );
        }
    }

    #[test]
    fn hinge_hand_value() {
        // max(0, 1 - 0.2 + 0.5) = 1.3
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let pos = tape.constant(Tensor::scalar(0.2));
        let neg = tape.constant(Tensor::scalar(0.5));
        let h = tape.hinge(pos, neg).unwrap();
        assert!((tape.value(h).as_scalar().unwrap() - 1.3).abs() < 1e-15);
    }

    #[test]
    fn active_hinge_step_does_not_shrink_the_margin() {
        let mut rng = rngutil::stream(21, "margin");
        for trial in 0..5 {
            let mut ranker = RankerParams::init(20, small_config(), None, 100 + trial).unwrap();
            let a: Vec<u32> = (0..3).map(|_| rng.gen_range(2..20)).collect();
            let p: Vec<u32> = (0..4).map(|_| rng.gen_range(2..20)).collect();
            let n: Vec<u32> = (0..4).map(|_| rng.gen_range(2..20)).collect();
            if p == n {
                continue;
            }
            let pair = TrainingPair {
                anchor: seq(&a),
                positive: seq(&p),
                negative: seq(&n),
            };
            let before = ranker.score(&pair.anchor, &pair.positive).unwrap()
                - ranker.score(&pair.anchor, &pair.negative).unwrap();
            let loss = ranker.train_step(&[pair.clone()], 1e-4).unwrap();
            assert!(loss > 0.0, "hinge inactive on random init");
            let after = ranker.score(&pair.anchor, &pair.positive).unwrap()
                - ranker.score(&pair.anchor, &pair.negative).unwrap();
            assert!(
                after >= before - 1e-9,
                "margin shrank: {} -> {}",
                before,
                after
            );
        }
    }

    #[test]
    fn toy_separable_set_converges() {
        // positive docs share marker token 2, negatives share 3
        let cfg = RankerConfig {
            embed_dim: 8,
            filters: 4,
            ..RankerConfig::default()
        };
        let mut ranker = RankerParams::init(10, cfg, None, 42).unwrap();
        let batch: Vec<TrainingPair> = (0..4)
            .map(|i| TrainingPair {
                anchor: seq(&[4 + i]),
                positive: seq(&[2, 4 + i, 5]),
                negative: seq(&[3, 6, 7]),
            })
            .collect();
        let mut last = f64::INFINITY;
        for _ in 0..200 {
            last = ranker.train_step(&batch, 1e-2).unwrap() / batch.len() as f64;
        }
        assert!(last < 0.05, "mean loss stayed at {}", last);
    }

    #[test]
    fn two_identical_runs_are_bit_identical() {
        let make = || {
            let mut ranker = RankerParams::init(12, small_config(), None, 77).unwrap();
            let batch = vec![TrainingPair {
                anchor: seq(&[2, 3]),
                positive: seq(&[4, 5]),
                negative: seq(&[6, 7]),
            }];
            for _ in 0..3 {
                ranker.train_step(&batch, 1e-3).unwrap();
            }
            ranker
        };
        let a = make();
        let b = make();
        for id in a.store.ids() {
            assert_eq!(a.store.value(id).data(), b.store.value(id).data());
        }
    }
}
