//! The training-pair selection policy: a state network over the anchor,
//! the document and their interaction, a two-way action head, a
//! discriminator warm-up, and REINFORCE updates from episode returns.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::autodiff::{conv1d_grams_forward, KernelConfig};
use crate::corpus::{EmbeddingTable, TokenSeq};
use crate::error::{Error, Result};
use crate::ranker::{FeatureStack, GramCache};
use crate::rngutil;

/// How episode returns weight the log-probability terms of the update:
/// the mean return for every decision (the default), or each step's own
/// discounted return.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReturnWeighting {
    MeanReturn,
    PerStepReturn,
}

#[derive(Debug, Clone)]
pub struct PolicyConfig {
    pub embed_dim: usize,
    /// Filters per state-CNN window.
    pub state_filters: usize,
    /// State-CNN window sizes.
    pub state_windows: Vec<usize>,
    /// Filters per width in the interaction feature stack.
    pub interaction_filters: usize,
    pub gram_widths: Vec<usize>,
    pub kernels: KernelConfig,
    pub return_weighting: ReturnWeighting,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            embed_dim: 300,
            state_filters: 50,
            state_windows: vec![3, 4, 5],
            interaction_filters: 128,
            gram_widths: vec![1, 2, 3],
            kernels: KernelConfig::standard(),
            return_weighting: ReturnWeighting::MeanReturn,
        }
    }
}

impl PolicyConfig {
    pub fn state_dim(&self) -> usize {
        2 * self.state_windows.len() * self.state_filters
            + self.gram_widths.len() * self.gram_widths.len() * self.kernels.count()
    }
}

/// Whether actions are sampled from the policy distribution (training) or
/// taken greedily (evaluation and analysis).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActMode {
    Sample,
    Argmax,
}

/// One selection decision over an anchor-document pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub pair_id: u64,
    pub action: u8,
    pub prob_select: f64,
    pub log_prob: f64,
}

/// Selector parameters. None of these are shared with the ranker; the
/// policy owns its embedding table, its state CNNs, a full interaction
/// feature stack and the two-way action layer.
#[derive(Debug, Clone)]
pub struct PolicyParams {
    pub store: ParamStore,
    embedding: ParamId,
    anchor_filters: Vec<ParamId>,
    anchor_biases: Vec<ParamId>,
    doc_filters: Vec<ParamId>,
    doc_biases: Vec<ParamId>,
    interaction: FeatureStack,
    w_act: ParamId,
    b_act: ParamId,
    pub config: PolicyConfig,
}

impl PolicyParams {
    pub fn init(
        vocab_size: usize,
        config: PolicyConfig,
        table: Option<&EmbeddingTable>,
        seed: u64,
    ) -> Result<Self> {
        let mut store = ParamStore::new();
        let matrix = match table {
            Some(t) => {
                if t.dim() != config.embed_dim || t.vocab_size() != vocab_size {
                    return Err(Error::Shape(format!(
                        "embedding table {}x{} does not match vocab {} dim {}",
                        t.vocab_size(),
                        t.dim(),
                        vocab_size,
                        config.embed_dim
                    )));
                }
                t.matrix.clone()
            }
            None => crate::corpus::random_embedding(
                vocab_size,
                config.embed_dim,
                seed,
                "policy-embed",
            ),
        };
        let embedding = store.add("policy.embedding", matrix);
        let mut rng = rngutil::stream(seed, "policy-state");
        let mut anchor_filters = Vec::new();
        let mut anchor_biases = Vec::new();
        let mut doc_filters = Vec::new();
        let mut doc_biases = Vec::new();
        for (side, filters, biases) in [
            ("anchor", &mut anchor_filters, &mut anchor_biases),
            ("doc", &mut doc_filters, &mut doc_biases),
        ] {
            for w in &config.state_windows {
                let mut t = Tensor::zeros(&[w * config.embed_dim, config.state_filters]);
                for v in t.data_mut() {
                    *v = rng.gen_range(-0.1..0.1);
                }
                filters.push(store.add(&format!("policy.{}{}.weight", side, w), t));
                biases.push(store.add(
                    &format!("policy.{}{}.bias", side, w),
                    Tensor::zeros(&[config.state_filters]),
                ));
            }
        }
        let interaction = FeatureStack::init_shared_embedding(
            &mut store,
            "policy.interaction",
            embedding,
            config.interaction_filters,
            &config.gram_widths,
            &config.kernels,
            seed ^ 0x5b1c,
        );
        // interaction features are log-scale, so the action layer starts
        // small enough to keep initial probabilities near one half
        let mut w = Tensor::zeros(&[2, config.state_dim()]);
        for v in w.data_mut() {
            *v = rng.gen_range(-1e-3..1e-3);
        }
        let w_act = store.add("policy.action.weight", w);
        let b_act = store.add("policy.action.bias", Tensor::vector(vec![0.0, 0.0]));
        Ok(PolicyParams {
            store,
            embedding,
            anchor_filters,
            anchor_biases,
            doc_filters,
            doc_biases,
            interaction,
            w_act,
            b_act,
            config,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.config.state_dim()
    }

    fn side_state(
        &self,
        seq: &TokenSeq,
        filters: &[ParamId],
        biases: &[ParamId],
    ) -> Result<Vec<f64>> {
        if seq.is_empty() {
            return Err(Error::Data(format!(
                "cannot encode empty sequence {}",
                seq.source_id
            )));
        }
        let table = self.store.value(self.embedding);
        let dim = table.cols();
        let mut rows = Vec::with_capacity(seq.len() * dim);
        for t in &seq.tokens {
            rows.extend_from_slice(table.row(*t as usize));
        }
        let e = Tensor::from_vec(&[seq.len(), dim], rows)?;
        let mut out = Vec::with_capacity(self.config.state_windows.len() * self.config.state_filters);
        for ((w, f), b) in self
            .config
            .state_windows
            .iter()
            .zip(filters)
            .zip(biases)
        {
            let conv = conv1d_grams_forward(&e, self.store.value(*f), self.store.value(*b), *w)?;
            // max over positions, per filter
            for c in 0..conv.cols() {
                let mut m = conv.at2(0, c);
                for r in 1..conv.rows() {
                    m = m.max(conv.at2(r, c));
                }
                out.push(m);
            }
        }
        Ok(out)
    }

    /// Frozen-parameter state vector `s = s_anchor | s_doc | s_interaction`.
    pub fn encode_state(&self, anchor: &TokenSeq, doc: &TokenSeq) -> Result<Vec<f64>> {
        let mut s = self.side_state(anchor, &self.anchor_filters, &self.anchor_biases)?;
        s.extend(self.side_state(doc, &self.doc_filters, &self.doc_biases)?);
        s.extend(self.interaction.features(&self.store, anchor, doc)?);
        Ok(s)
    }

    fn side_state_traced(
        &self,
        tape: &mut Tape,
        seq: &TokenSeq,
        filters: &[ParamId],
        biases: &[ParamId],
        cache: &mut GramCache,
    ) -> Result<Vec<Var>> {
        if seq.is_empty() {
            return Err(Error::Data(format!(
                "cannot encode empty sequence {}",
                seq.source_id
            )));
        }
        let e = tape.embed_rows(&self.store, self.embedding, &seq.tokens)?;
        let mut parts = Vec::new();
        for ((w, f), b) in self
            .config
            .state_windows
            .iter()
            .zip(filters)
            .zip(biases)
        {
            let fv = cache.param(tape, &self.store, *f);
            let bv = cache.param(tape, &self.store, *b);
            let conv = tape.conv1d_grams(e, fv, bv, *w)?;
            parts.push(tape.max_over_rows(conv)?);
        }
        Ok(parts)
    }

    /// Tape-path action logits for one pair.
    fn logits_traced(
        &self,
        tape: &mut Tape,
        anchor: &TokenSeq,
        doc: &TokenSeq,
        cache: &mut GramCache,
    ) -> Result<Var> {
        let mut parts =
            self.side_state_traced(tape, anchor, &self.anchor_filters, &self.anchor_biases, cache)?;
        parts.extend(self.side_state_traced(
            tape,
            doc,
            &self.doc_filters,
            &self.doc_biases,
            cache,
        )?);
        parts.push(
            self.interaction
                .features_traced(tape, &self.store, anchor, doc, cache)?,
        );
        let state = tape.concat(&parts)?;
        let w = cache.param(tape, &self.store, self.w_act);
        let b = cache.param(tape, &self.store, self.b_act);
        tape.affine(state, w, b)
    }

    /// Action logits (keep, select) for a state vector.
    pub fn logits(&self, state: &[f64]) -> Result<[f64; 2]> {
        let w = self.store.value(self.w_act);
        let b = self.store.value(self.b_act);
        if state.len() != w.cols() {
            return Err(Error::Shape(format!(
                "state of {} values against action layer of {}",
                state.len(),
                w.cols()
            )));
        }
        let mut out = [b.data()[0], b.data()[1]];
        for (o, out_v) in out.iter_mut().enumerate() {
            for (c, s) in state.iter().enumerate() {
                *out_v += w.at2(o, c) * s;
            }
        }
        if !out.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("action logits".into()));
        }
        Ok(out)
    }

    /// Decide on one state: argmax mode takes the higher-probability
    /// action with ties going to select; sample mode draws from the
    /// two-way distribution.
    pub fn act(
        &self,
        state: &[f64],
        pair_id: u64,
        mode: ActMode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Decision> {
        let logits = self.logits(state)?;
        let (p_keep, p_select) = softmax2(logits);
        let action = match mode {
            ActMode::Argmax => u8::from(p_select >= p_keep),
            ActMode::Sample => u8::from(rng.gen::<f64>() < p_select),
        };
        let p_taken = if action == 1 { p_select } else { p_keep };
        Ok(Decision {
            pair_id,
            action,
            prob_select: p_select,
            log_prob: p_taken.ln(),
        })
    }

    /// Run the policy over a batch of (pair_id, anchor, doc) triples;
    /// returns the selected indices (input order preserved) and the
    /// decision for every pair.
    pub fn select_batch(
        &self,
        batch: &[(u64, &TokenSeq, &TokenSeq)],
        mode: ActMode,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Vec<usize>, Vec<Decision>)> {
        if batch.is_empty() {
            return Err(Error::Data("empty selection batch".into()));
        }
        let mut selected = Vec::new();
        let mut decisions = Vec::with_capacity(batch.len());
        for (i, (pair_id, anchor, doc)) in batch.iter().enumerate() {
            let state = self.encode_state(anchor, doc)?;
            let d = self.act(&state, *pair_id, mode, rng)?;
            if d.action == 1 {
                selected.push(i);
            }
            decisions.push(d);
        }
        Ok((selected, decisions))
    }

    /// Cross-entropy warm-up of the state and action networks as a binary
    /// classifier: query-document pairs are class 1, anchor-document pairs
    /// class 0. Every fifth example of each class is held out, and the
    /// report carries the held-out accuracy plus per-epoch training loss.
    pub fn warmup_discriminator(
        &mut self,
        pos: &[(TokenSeq, TokenSeq)],
        neg: &[(TokenSeq, TokenSeq)],
        epochs: usize,
        lr: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<WarmupReport> {
        if pos.is_empty() || neg.is_empty() {
            return Err(Error::Data(
                "discriminator warm-up needs both classes".into(),
            ));
        }
        let mut train: Vec<(&(TokenSeq, TokenSeq), usize)> = Vec::new();
        let mut held: Vec<(&(TokenSeq, TokenSeq), usize)> = Vec::new();
        for (class, set) in [(1usize, pos), (0usize, neg)] {
            for (i, ex) in set.iter().enumerate() {
                if i % 5 == 4 {
                    held.push((ex, class));
                } else {
                    train.push((ex, class));
                }
            }
        }
        let mut epoch_losses = Vec::with_capacity(epochs);
        for _ in 0..epochs {
            let mut order: Vec<usize> = (0..train.len()).collect();
            for i in (1..order.len()).rev() {
                let j = rng.gen_range(0..=i);
                order.swap(i, j);
            }
            let mut loss_sum = 0.0;
            for chunk in order.chunks(8) {
                let mut tape = Tape::new(&self.store);
                let mut cache = GramCache::default();
                let mut terms = Vec::with_capacity(chunk.len());
                for idx in chunk {
                    let ((anchor, doc), class) = &train[*idx];
                    let logits = self.logits_traced(&mut tape, anchor, doc, &mut cache)?;
                    let logp = tape.log_softmax(logits)?;
                    let picked = tape.pick(logp, *class)?;
                    terms.push(tape.scale(picked, -1.0));
                }
                let total = tape.sum_scalars(&terms)?;
                let loss = tape.scale(total, 1.0 / chunk.len() as f64);
                loss_sum += tape.value(total).as_scalar()?;
                tape.backward(loss, &mut self.store)?;
                self.store.adam_step_all(lr)?;
            }
            epoch_losses.push(loss_sum / train.len() as f64);
        }
        let eval_set: &[(&(TokenSeq, TokenSeq), usize)] = if held.is_empty() { &train } else { &held };
        let mut correct = 0usize;
        for ((anchor, doc), class) in eval_set {
            let state = self.encode_state(anchor, doc)?;
            let logits = self.logits(&state)?;
            let (p0, p1) = softmax2(logits);
            let predicted = usize::from(p1 >= p0);
            if predicted == *class {
                correct += 1;
            }
        }
        Ok(WarmupReport {
            accuracy: correct as f64 / eval_set.len() as f64,
            epoch_losses,
        })
    }

    /// One REINFORCE ascent step from a finished episode: the surrogate is
    /// the return-weighted sum of log-probabilities of every taken action,
    /// selected or not.
    pub fn policy_update(&mut self, episode: &EpisodeBuffer, alpha: f64) -> Result<()> {
        let (returns, mean_return) = episode.returns()?;
        if !mean_return.is_finite() {
            return Err(Error::NonFinite("episode mean return".into()));
        }
        let weights: Vec<f64> = match self.config.return_weighting {
            ReturnWeighting::MeanReturn => vec![mean_return; returns.len()],
            ReturnWeighting::PerStepReturn => returns.clone(),
        };
        if weights.iter().all(|w| *w == 0.0) {
            return Ok(()); // zero objective: parameters provably unchanged
        }
        let mut tape = Tape::new(&self.store);
        let mut cache = GramCache::default();
        let mut step_terms = Vec::new();
        for (step, weight) in episode.steps().iter().zip(&weights) {
            if *weight == 0.0 {
                continue;
            }
            let mut picks = Vec::with_capacity(step.decisions.len());
            for ((anchor, doc), decision) in step.pairs.iter().zip(&step.decisions) {
                let logits = self.logits_traced(&mut tape, anchor, doc, &mut cache)?;
                let logp = tape.log_softmax(logits)?;
                picks.push(tape.pick(logp, decision.action as usize)?);
            }
            let sum = tape.sum_scalars(&picks)?;
            step_terms.push(tape.scale(sum, *weight));
        }
        let objective = tape.sum_scalars(&step_terms)?;
        tape.backward(objective, &mut self.store)?;
        self.store.ascent_step_all(alpha)?;
        Ok(())
    }

    /// Surrogate objective value and tape for gradient checks.
    pub fn episode_objective_tape(&self, episode: &EpisodeBuffer) -> Result<(Tape, Var)> {
        let (returns, mean_return) = episode.returns()?;
        let weights: Vec<f64> = match self.config.return_weighting {
            ReturnWeighting::MeanReturn => vec![mean_return; returns.len()],
            ReturnWeighting::PerStepReturn => returns,
        };
        let mut tape = Tape::new(&self.store);
        let mut cache = GramCache::default();
        let mut step_terms = Vec::new();
        for (step, weight) in episode.steps().iter().zip(&weights) {
            let mut picks = Vec::with_capacity(step.decisions.len());
            for ((anchor, doc), decision) in step.pairs.iter().zip(&step.decisions) {
                let logits = self.logits_traced(&mut tape, anchor, doc, &mut cache)?;
                let logp = tape.log_softmax(logits)?;
                picks.push(tape.pick(logp, decision.action as usize)?);
            }
            let sum = tape.sum_scalars(&picks)?;
            step_terms.push(tape.scale(sum, *weight));
        }
        let objective = tape.sum_scalars(&step_terms)?;
        Ok((tape, objective))
    }

    /// Sum of log-probabilities the current parameters assign to the
    /// episode's taken actions.
    pub fn episode_log_prob(&self, episode: &EpisodeBuffer) -> Result<f64> {
        let mut total = 0.0;
        for step in episode.steps() {
            for ((anchor, doc), decision) in step.pairs.iter().zip(&step.decisions) {
                let state = self.encode_state(anchor, doc)?;
                let logits = self.logits(&state)?;
                let (p0, p1) = softmax2(logits);
                let p = if decision.action == 1 { p1 } else { p0 };
                total += p.ln();
            }
        }
        Ok(total)
    }

    /// Test hook: overwrite the action layer so decisions are forced.
    pub fn force_action_bias(&mut self, keep_logit: f64, select_logit: f64) -> Result<()> {
        let dim = self.config.state_dim();
        self.store
            .set_value(self.w_act, Tensor::zeros(&[2, dim]))?;
        self.store
            .set_value(self.b_act, Tensor::vector(vec![keep_logit, select_logit]))
    }
}

fn softmax2(logits: [f64; 2]) -> (f64, f64) {
    let m = logits[0].max(logits[1]);
    let e0 = (logits[0] - m).exp();
    let e1 = (logits[1] - m).exp();
    let z = e0 + e1;
    (e0 / z, e1 / z)
}

/// Held-out accuracy and per-epoch training loss of a warm-up run.
#[derive(Debug, Clone)]
pub struct WarmupReport {
    pub accuracy: f64,
    pub epoch_losses: Vec<f64>,
}

/// Decisions of one batch within an episode, with the pair texts kept so
/// the update pass can rebuild the graph.
#[derive(Debug, Clone)]
pub struct EpisodeStep {
    pub pairs: Vec<(TokenSeq, TokenSeq)>,
    pub decisions: Vec<Decision>,
}

/// Per-episode record: T steps of decisions plus their rewards, reduced to
/// discounted returns by [`compute_returns`].
#[derive(Debug, Clone)]
pub struct EpisodeBuffer {
    pub discount: f64,
    steps: Vec<EpisodeStep>,
    rewards: Vec<f64>,
    finalized: Option<(Vec<f64>, f64)>,
}

impl EpisodeBuffer {
    pub fn new(discount: f64) -> Self {
        EpisodeBuffer {
            discount,
            steps: Vec::new(),
            rewards: Vec::new(),
            finalized: None,
        }
    }

    pub fn push_step(&mut self, step: EpisodeStep, reward: f64) {
        self.steps.push(step);
        self.rewards.push(reward);
        self.finalized = None;
    }

    pub fn steps(&self) -> &[EpisodeStep] {
        &self.steps
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn finalize(&mut self) -> Result<()> {
        let (returns, mean) = compute_returns(&self.rewards, self.discount)?;
        self.finalized = Some((returns, mean));
        Ok(())
    }

    /// Discounted returns and their mean; errors if not finalized.
    pub fn returns(&self) -> Result<(Vec<f64>, f64)> {
        self.finalized
            .clone()
            .ok_or_else(|| Error::Data("episode not finalized".into()))
    }
}

/// Discounted suffix returns `R_t = sum_{j>=t} c^(j-t) r_j` and their mean.
pub fn compute_returns(rewards: &[f64], discount: f64) -> Result<(Vec<f64>, f64)> {
    if rewards.is_empty() {
        return Err(Error::Data("episode has no rewards".into()));
    }
    if !(discount > 0.0 && discount <= 1.0) {
        return Err(Error::Config(format!(
            "discount must lie in (0, 1], got {}",
            discount
        )));
    }
    let mut returns = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (i, r) in rewards.iter().enumerate().rev() {
        acc = r + discount * acc;
        returns[i] = acc;
    }
    let mean = returns.iter().sum::<f64>() / returns.len() as f64;
    Ok((returns, mean))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> PolicyConfig {
        PolicyConfig {
            embed_dim: 6,
            state_filters: 3,
            interaction_filters: 4,
            ..PolicyConfig::default()
        }
    }

    fn seq(tokens: &[u32]) -> TokenSeq {
        TokenSeq::new(tokens.to_vec(), "t")
    }

    #[test]
    fn state_dimension_follows_the_formula() {
        let pp = PolicyParams::init(12, small_config(), None, 3).unwrap();
        let s = pp.encode_state(&seq(&[2, 3]), &seq(&[4, 5, 6])).unwrap();
        assert_eq!(s.len(), 2 * 3 * 3 + 189);
        assert_eq!(s.len(), pp.state_dim());
        // default sizes reproduce the 489-dim state
        assert_eq!(PolicyConfig::default().state_dim(), 489);
    }

    #[test]
    fn zero_embeddings_zero_biases_give_zero_side_states() {
        let mut pp = PolicyParams::init(12, small_config(), None, 3).unwrap();
        let dim = pp.config.embed_dim;
        pp.store
            .set_value(pp.embedding, Tensor::zeros(&[12, dim]))
            .unwrap();
        let s = pp.encode_state(&seq(&[2, 3]), &seq(&[4, 5, 6])).unwrap();
        let side_len = 2 * pp.config.state_windows.len() * pp.config.state_filters;
        assert!(s[..side_len].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn empty_inputs_are_hard_errors() {
        let pp = PolicyParams::init(12, small_config(), None, 3).unwrap();
        assert!(pp.encode_state(&seq(&[]), &seq(&[2])).is_err());
        assert!(pp.encode_state(&seq(&[2]), &seq(&[])).is_err());
    }

    // Independent scalar re-implementation of the full state encoding.
    #[test]
    fn state_matches_independent_oracle() {
        let pp = PolicyParams::init(15, small_config(), None, 9).unwrap();
        let a = seq(&[2, 7, 9]);
        let d = seq(&[3, 4, 10, 11, 5]);
        let got = pp.encode_state(&a, &d).unwrap();

        let store = &pp.store;
        let table = store.value(pp.embedding);
        let dim = pp.config.embed_dim;
        let fs = pp.config.state_filters;
        let embed = |toks: &[u32]| -> Vec<Vec<f64>> {
            toks.iter().map(|t| table.row(*t as usize).to_vec()).collect()
        };
        let conv_max = |toks: &[u32], filters: &[ParamId], biases: &[ParamId]| -> Vec<f64> {
            let e = embed(toks);
            let m = e.len();
            let mut out = Vec::new();
            for ((w, fid), bid) in pp.config.state_windows.iter().zip(filters).zip(biases) {
                let fmat = store.value(*fid);
                let bvec = store.value(*bid);
                for filt in 0..fs {
                    let mut best = f64::NEG_INFINITY;
                    for i in 0..m {
                        let mut acc = bvec.data()[filt];
                        for j in 0..*w {
                            if i + j >= m {
                                continue;
                            }
                            for c in 0..dim {
                                acc += e[i + j][c] * fmat.at2(j * dim + c, filt);
                            }
                        }
                        best = best.max(acc.max(0.0));
                    }
                    out.push(best);
                }
            }
            out
        };
        let mut expect = conv_max(&a.tokens, &pp.anchor_filters, &pp.anchor_biases);
        expect.extend(conv_max(&d.tokens, &pp.doc_filters, &pp.doc_biases));
        // interaction features via independent loops
        let gram = |toks: &[u32], widx: usize| -> Vec<Vec<f64>> {
            let e = embed(toks);
            let m = e.len();
            let h = pp.config.gram_widths[widx];
            let fmat = store.value(pp.interaction.filters[widx]);
            let bvec = store.value(pp.interaction.biases[widx]);
            let nf = pp.config.interaction_filters;
            (0..m)
                .map(|i| {
                    (0..nf)
                        .map(|f| {
                            let mut acc = bvec.data()[f];
                            for j in 0..h {
                                if i + j >= m {
                                    continue;
                                }
                                for c in 0..dim {
                                    acc += e[i + j][c] * fmat.at2(j * dim + c, f);
                                }
                            }
                            acc.max(0.0)
                        })
                        .collect()
                })
                .collect()
        };
        for wq in 0..3 {
            for wd in 0..3 {
                let gq = gram(&a.tokens, wq);
                let gd = gram(&d.tokens, wd);
                for k in 0..pp.config.kernels.count() {
                    let mu = pp.config.kernels.mus()[k];
                    let delta = pp.config.kernels.deltas()[k];
                    let mut phi = 0.0;
                    for qi in &gq {
                        let nq = qi.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let mut inner = 0.0;
                        for dj in &gd {
                            let nd = dj.iter().map(|v| v * v).sum::<f64>().sqrt();
                            let mut cos = 0.0;
                            if nq >= 1e-12 && nd >= 1e-12 {
                                let dot: f64 =
                                    qi.iter().zip(dj).map(|(x, y)| x * y).sum();
                                cos = dot / (nq * nd);
                            }
                            let diff = cos - mu;
                            inner += (-diff * diff / (2.0 * delta * delta)).exp();
                        }
                        phi += inner.max(1e-10).ln();
                    }
                    expect.push(phi);
                }
            }
        }
        assert_eq!(got.len(), expect.len());
        for (g, e) in got.iter().zip(&expect) {
            assert!((g - e).abs() < 1e-9, "{} vs {}", g, e);
        }
    }

    #[test]
    fn equal_logits_mean_half_probability_and_argmax_selects() {
        let mut pp = PolicyParams::init(12, small_config(), None, 3).unwrap();
        pp.force_action_bias(0.0, 0.0).unwrap();
        let state = pp.encode_state(&seq(&[2]), &seq(&[3, 4])).unwrap();
        let mut rng = rngutil::stream(1, "act");
        let d = pp.act(&state, 0, ActMode::Argmax, &mut rng).unwrap();
        assert_eq!(d.prob_select, 0.5);
        assert_eq!(d.action, 1);
        assert!((d.log_prob - 0.5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn ten_logit_gap_gives_hand_computed_probability() {
        let mut pp = PolicyParams::init(12, small_config(), None, 3).unwrap();
        pp.force_action_bias(0.0, 10.0).unwrap();
        let state = pp.encode_state(&seq(&[2]), &seq(&[3, 4])).unwrap();
        let mut rng = rngutil::stream(1, "act");
        let d = pp.act(&state, 0, ActMode::Argmax, &mut rng).unwrap();
        let expect = (10f64).exp() / (1.0 + (10f64).exp());
        assert!((d.prob_select - expect).abs() < 1e-12);
        assert!(d.prob_select > 0.9999);
        assert_eq!(d.action, 1);
    }

    #[test]
    fn shifting_both_logits_leaves_probabilities_unchanged() {
        let (p0, p1) = softmax2([0.3, -0.8]);
        let (q0, q1) = softmax2([0.3 + 17.0, -0.8 + 17.0]);
        assert!((p0 - q0).abs() < 1e-12);
        assert!((p1 - q1).abs() < 1e-12);
    }

    #[test]
    fn sampling_is_seed_reproducible() {
        let pp = PolicyParams::init(12, small_config(), None, 3).unwrap();
        let batch_seqs: Vec<(TokenSeq, TokenSeq)> = (0..6)
            .map(|i| (seq(&[2 + i]), seq(&[3 + i, 4])))
            .collect();
        let batch: Vec<(u64, &TokenSeq, &TokenSeq)> = batch_seqs
            .iter()
            .enumerate()
            .map(|(i, (a, d))| (i as u64, a, d))
            .collect();
        let r1 = pp
            .select_batch(&batch, ActMode::Sample, &mut rngutil::stream(5, "sel"))
            .unwrap();
        let r2 = pp
            .select_batch(&batch, ActMode::Sample, &mut rngutil::stream(5, "sel"))
            .unwrap();
        assert_eq!(r1.0, r2.0);
        assert_eq!(r1.1, r2.1);
    }

    #[test]
    fn forced_policies_select_all_or_none() {
        let mut pp = PolicyParams::init(12, small_config(), None, 3).unwrap();
        let batch_seqs: Vec<(TokenSeq, TokenSeq)> =
            (0..5).map(|i| (seq(&[2 + i]), seq(&[3, 4]))).collect();
        let batch: Vec<(u64, &TokenSeq, &TokenSeq)> = batch_seqs
            .iter()
            .enumerate()
            .map(|(i, (a, d))| (i as u64, a, d))
            .collect();
        pp.force_action_bias(-40.0, 40.0).unwrap();
        let (sel, dec) = pp
            .select_batch(&batch, ActMode::Sample, &mut rngutil::stream(2, "sel"))
            .unwrap();
        assert_eq!(sel.len(), batch.len());
        assert_eq!(sel.len(), dec.iter().filter(|d| d.action == 1).count());
        pp.force_action_bias(40.0, -40.0).unwrap();
        let (sel, dec) = pp
            .select_batch(&batch, ActMode::Sample, &mut rngutil::stream(2, "sel"))
            .unwrap();
        assert!(sel.is_empty());
        assert_eq!(dec.iter().filter(|d| d.action == 1).count(), 0);
    }

    #[test]
    fn returns_hand_examples() {
        let (r, mean) = compute_returns(&[0.1, -0.05], 0.99).unwrap();
        assert!((r[0] - 0.0505).abs() < 1e-12);
        assert!((r[1] + 0.05).abs() < 1e-12);
        assert!((mean - 0.00025).abs() < 1e-12);

        let (r, mean) = compute_returns(&[1.0, 1.0, 1.0], 1.0).unwrap();
        assert_eq!(r, vec![3.0, 2.0, 1.0]);
        assert_eq!(mean, 2.0);

        let (r, mean) = compute_returns(&[0.0, 0.0, 0.0], 0.99).unwrap();
        assert!(r.iter().all(|v| *v == 0.0));
        assert_eq!(mean, 0.0);

        assert!(compute_returns(&[], 0.99).is_err());
        assert!(compute_returns(&[1.0], 0.0).is_err());
        assert!(compute_returns(&[1.0], 1.5).is_err());
    }

    fn tiny_episode(pp: &PolicyParams, reward: f64, mode: ActMode) -> EpisodeBuffer {
        let mut episode = EpisodeBuffer::new(0.99);
        let pairs = vec![(seq(&[2, 3]), seq(&[4, 5, 6]))];
        let mut rng = rngutil::stream(11, "episode");
        let state = pp.encode_state(&pairs[0].0, &pairs[0].1).unwrap();
        let d = pp.act(&state, 0, mode, &mut rng).unwrap();
        episode.push_step(
            EpisodeStep {
                pairs,
                decisions: vec![d],
            },
            reward,
        );
        episode.finalize().unwrap();
        episode
    }

    #[test]
    fn zero_mean_return_leaves_parameters_unchanged() {
        let mut pp = PolicyParams::init(12, small_config(), None, 3).unwrap();
        let episode = tiny_episode(&pp, 0.0, ActMode::Sample);
        let before: Vec<Vec<f64>> = pp
            .store
            .ids()
            .map(|id| pp.store.value(id).data().to_vec())
            .collect();
        pp.policy_update(&episode, 1e-3).unwrap();
        let after: Vec<Vec<f64>> = pp
            .store
            .ids()
            .map(|id| pp.store.value(id).data().to_vec())
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn positive_return_raises_probability_of_taken_action() {
        for trial in 0..5 {
            let mut pp = PolicyParams::init(14, small_config(), None, 40 + trial).unwrap();
            let episode = tiny_episode(&pp, 0.05, ActMode::Sample);
            let before = pp.episode_log_prob(&episode).unwrap();
            pp.policy_update(&episode, 1e-5).unwrap();
            let after = pp.episode_log_prob(&episode).unwrap();
            assert!(
                after > before,
                "trial {}: log-prob {} -> {}",
                trial,
                before,
                after
            );
        }
    }

    #[test]
    fn warmup_separable_marker_token_reaches_high_accuracy() {
        let mut pp = PolicyParams::init(30, small_config(), None, 5).unwrap();
        // positives carry marker token 2 in the query side
        let pos: Vec<(TokenSeq, TokenSeq)> = (0..40)
            .map(|i| (seq(&[2, 10 + (i % 8)]), seq(&[11 + (i % 9), 12, 13])))
            .collect();
        let neg: Vec<(TokenSeq, TokenSeq)> = (0..40)
            .map(|i| (seq(&[3, 10 + (i % 8)]), seq(&[11 + (i % 9), 12, 13])))
            .collect();
        let mut rng = rngutil::stream(7, "warmup");
        let report = pp.warmup_discriminator(&pos, &neg, 8, 1e-3, &mut rng).unwrap();
        assert!(
            report.accuracy >= 0.9,
            "separable accuracy only {}",
            report.accuracy
        );
        let first = report.epoch_losses.first().unwrap();
        let last = report.epoch_losses.last().unwrap();
        assert!(last < first, "loss went {} -> {}", first, last);
    }

    #[test]
    fn warmup_identical_distributions_hover_near_chance() {
        let mut accs = Vec::new();
        for s in 0..3 {
            let mut pp = PolicyParams::init(30, small_config(), None, 60 + s).unwrap();
            let make = |offset: u64| -> Vec<(TokenSeq, TokenSeq)> {
                let mut rng = rngutil::stream(offset, "nulldata");
                (0..40)
                    .map(|_| {
                        let a: Vec<u32> = (0..3).map(|_| rng.gen_range(2..30)).collect();
                        let d: Vec<u32> = (0..6).map(|_| rng.gen_range(2..30)).collect();
                        (seq(&a), seq(&d))
                    })
                    .collect()
            };
            let pos = make(100 + s);
            let neg = make(200 + s);
            let mut rng = rngutil::stream(s, "warmup-null");
            let report = pp
                .warmup_discriminator(&pos, &neg, 3, 1e-3, &mut rng)
                .unwrap();
            accs.push(report.accuracy);
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        assert!(
            (0.3..=0.7).contains(&mean),
            "null accuracy drifted to {}",
            mean
        );
    }

    #[test]
    fn warmup_rejects_single_class() {
        let mut pp = PolicyParams::init(12, small_config(), None, 3).unwrap();
        let pos = vec![(seq(&[2]), seq(&[3]))];
        let mut rng = rngutil::stream(1, "warmup");
        assert!(pp.warmup_discriminator(&pos, &[], 1, 1e-3, &mut rng).is_err());
    }
}
