//! Autoregressive LSTM model over annotated-utterance symbols: likelihood
//! pre-training, ancestral sampling, rollout completion of prefixes, and the
//! policy-gradient update.
//!
//! Sampling is constrained to well-formed sequences: position 0 emits a
//! header symbol, position 1 a token-label symbol, later positions a
//! token-label symbol or the end marker, and the end marker is forced once
//! the body cap is reached. Every sample therefore decodes.

use rand::Rng;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{TokenSequence, Vocabulary, BOS, EOS};
use crate::layers::LstmCell;
use crate::num::init::xavier_uniform;
use crate::num::{
    indexed_rng, stream_rng, NodeId, NumError, Optimizer, ParamStore, Session, Tensor,
};

#[derive(Debug, Error)]
pub enum GenError {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("rollout prefix already contains the end marker")]
    PrefixTerminated,
    #[error("symbol id {0} outside vocabulary of size {1}")]
    VocabMismatch(u32, usize),
    #[error("reward vector length {got} does not match sequence length {want}")]
    RewardMismatch { got: usize, want: usize },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    /// Maximum body length (token count) of a generated utterance.
    pub max_len: usize,
    /// Sampling-only softmax temperature; 0 means argmax.
    pub temperature: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            embed_dim: 64,
            hidden_dim: 128,
            max_len: 16,
            temperature: 1.0,
        }
    }
}

/// Sequences sampled from the generator together with the log-probability
/// of every emitted symbol, as needed by the policy-gradient update.
#[derive(Clone, Debug, Default)]
pub struct SampledBatch {
    /// Each sequence is `[header, body..., eos?]`.
    pub sequences: Vec<Vec<u32>>,
    pub step_log_probs: Vec<Vec<f64>>,
}

const MASKED: f64 = -1e30;

pub struct Generator {
    pub config: GeneratorConfig,
    pub vocab: Vocabulary,
    pub params: ParamStore,
    cell: LstmCell,
    /// Additive logit masks by position class: header-only, body-only,
    /// body-or-end, end-only.
    masks: [Tensor; 4],
}

fn build_masks(vocab: &Vocabulary) -> [Tensor; 4] {
    let v = vocab.size();
    let mut header = vec![MASKED; v];
    let mut body = vec![MASKED; v];
    let mut body_or_end = vec![MASKED; v];
    let mut end_only = vec![MASKED; v];
    for id in 0..v as u32 {
        if vocab.is_header(id) {
            header[id as usize] = 0.0;
        }
        if vocab.is_body(id) {
            body[id as usize] = 0.0;
            body_or_end[id as usize] = 0.0;
        }
    }
    body_or_end[EOS as usize] = 0.0;
    end_only[EOS as usize] = 0.0;
    [
        Tensor::from_vec(header),
        Tensor::from_vec(body),
        Tensor::from_vec(body_or_end),
        Tensor::from_vec(end_only),
    ]
}

impl Generator {
    pub fn new(vocab: Vocabulary, config: GeneratorConfig, seed: u64) -> Self {
        let mut rng = stream_rng(seed, "generator-init");
        let mut params = ParamStore::new();
        let v = vocab.size();
        params.insert("embed", xavier_uniform(&mut rng, v, config.embed_dim));
        let cell = LstmCell::register(
            &mut params,
            "lstm",
            config.embed_dim,
            config.hidden_dim,
            &mut rng,
        );
        params.insert(
            "out.w",
            xavier_uniform(&mut rng, config.hidden_dim, v),
        );
        params.insert("out.b", Tensor::zeros(&[v]));
        let masks = build_masks(&vocab);
        Generator {
            config,
            vocab,
            params,
            cell,
            masks,
        }
    }

    /// Rebuild around an existing parameter store (checkpoint loading).
    pub fn from_params(vocab: Vocabulary, config: GeneratorConfig, params: ParamStore) -> Self {
        let cell = LstmCell::named(&params, "lstm");
        let masks = build_masks(&vocab);
        Generator {
            config,
            vocab,
            params,
            cell,
            masks,
        }
    }

    /// Additive mask for the symbol distribution at output position `t`.
    fn mask_for_position(&self, t: usize) -> &Tensor {
        if t == 0 {
            &self.masks[0]
        } else if t == 1 {
            &self.masks[1]
        } else if t <= self.config.max_len {
            &self.masks[2]
        } else {
            &self.masks[3]
        }
    }

    fn check_ids(&self, ids: &[u32]) -> Result<(), GenError> {
        let v = self.vocab.size() as u32;
        for &id in ids {
            if id >= v {
                return Err(GenError::VocabMismatch(id, v as usize));
            }
        }
        Ok(())
    }

    /// Teacher-forced per-position log-probabilities of `targets`
    /// (`[header, body..., eos?]`). Returns the `[T]` node of picked
    /// log-probs.
    fn sequence_log_probs(
        &self,
        sess: &mut Session,
        targets: &[u32],
    ) -> Result<NodeId, GenError> {
        let embed = sess.param(&self.params, "embed");
        let out_w = sess.param(&self.params, "out.w");
        let out_b = sess.param(&self.params, "out.b");
        let mut state = self.cell.zero_state(sess);
        let mut hs: Vec<NodeId> = Vec::with_capacity(targets.len());
        let mut input = BOS;
        for &target in targets {
            let x = sess.tape.embed_lookup(embed, &[input as usize])?;
            state = self.cell.step(sess, &self.params, x, state)?;
            hs.push(state.0);
            input = target;
        }
        let h = sess.tape.concat(&hs, 0)?;
        let raw = sess.tape.matmul(h, out_w)?;
        let logits = sess.tape.add(raw, out_b)?;
        let mask_rows: Vec<f64> = (0..targets.len())
            .flat_map(|t| self.mask_for_position(t).data().to_vec())
            .collect();
        let mask = sess.constant(
            Tensor::new(vec![targets.len(), self.vocab.size()], mask_rows).expect("mask shape"),
        );
        let masked = sess.tape.add(logits, mask)?;
        let logp = sess.tape.log_softmax(masked);
        let ids: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
        Ok(sess.tape.pick(logp, &ids)?)
    }

    /// Next-symbol distribution after `prefix`, at temperature 1. The
    /// reference path used by tests and enumeration oracles.
    pub fn step_distribution(&self, prefix: &[u32]) -> Result<Vec<f64>, GenError> {
        self.check_ids(prefix)?;
        let mut sess = Session::new();
        let embed = sess.param(&self.params, "embed");
        let out_w = sess.param(&self.params, "out.w");
        let out_b = sess.param(&self.params, "out.b");
        let mut state = self.cell.zero_state(&mut sess);
        let mut input = BOS;
        for &id in prefix {
            let x = sess.tape.embed_lookup(embed, &[input as usize])?;
            state = self.cell.step(&mut sess, &self.params, x, state)?;
            input = id;
        }
        let x = sess.tape.embed_lookup(embed, &[input as usize])?;
        state = self.cell.step(&mut sess, &self.params, x, state)?;
        let raw = sess.tape.matmul(state.0, out_w)?;
        let logits = sess.tape.add(raw, out_b)?;
        let mask = sess.constant(self.mask_for_position(prefix.len()).clone());
        let masked0 = sess.tape.slice(logits, 0, 0, 1)?;
        let flat = sess.tape.slice(masked0, 1, 0, self.vocab.size())?;
        let masked = sess.tape.add(flat, mask)?;
        let probs = sess.tape.softmax(masked);
        Ok(sess.tape.value(probs).data().to_vec())
    }

    /// Sample `count` sequences, optionally extending a fixed prefix.
    pub fn sample(
        &self,
        count: usize,
        seed_prefix: Option<&[u32]>,
        rng: &mut impl Rng,
    ) -> Result<SampledBatch, GenError> {
        if let Some(p) = seed_prefix {
            self.check_ids(p)?;
        }
        let mut batch = SampledBatch::default();
        for _ in 0..count {
            let (seq, lps) = self.sample_one(seed_prefix.unwrap_or(&[]), rng)?;
            batch.sequences.push(seq);
            batch.step_log_probs.push(lps);
        }
        Ok(batch)
    }

    /// Complete `prefix` `n` times with independent, reproducible draws.
    /// The model is read-only here; completions of one prefix run in
    /// parallel.
    pub fn rollouts(
        &self,
        prefix: &[u32],
        n: usize,
        seed: u64,
        tag: &[u64],
    ) -> Result<Vec<Vec<u32>>, GenError> {
        if prefix.contains(&EOS) {
            return Err(GenError::PrefixTerminated);
        }
        self.check_ids(prefix)?;
        (0..n)
            .into_par_iter()
            .map(|j| {
                let mut coords = tag.to_vec();
                coords.push(j as u64);
                let mut rng = indexed_rng(seed, "rollout", &coords);
                Ok(self.sample_one(prefix, &mut rng)?.0)
            })
            .collect()
    }

    fn sample_one(
        &self,
        prefix: &[u32],
        rng: &mut impl Rng,
    ) -> Result<(Vec<u32>, Vec<f64>), GenError> {
        let mut sess = Session::new();
        let embed = sess.param(&self.params, "embed");
        let out_w = sess.param(&self.params, "out.w");
        let out_b = sess.param(&self.params, "out.b");
        let mut state = self.cell.zero_state(&mut sess);
        let mut seq: Vec<u32> = Vec::new();
        let mut log_probs: Vec<f64> = Vec::new();
        let mut input = BOS;
        // Max output positions: header + body cap + end marker.
        let horizon = self.config.max_len + 2;
        for t in 0..horizon {
            let x = sess.tape.embed_lookup(embed, &[input as usize])?;
            state = self.cell.step(&mut sess, &self.params, x, state)?;
            let raw = sess.tape.matmul(state.0, out_w)?;
            let logits = sess.tape.add(raw, out_b)?;
            let row = sess.tape.value(logits).row(0);
            let mask = self.mask_for_position(t);
            let (id, lp) = if t < prefix.len() {
                // Teacher-forced prefix positions still record their
                // log-probability under the policy.
                let lp = masked_log_prob(row, mask.data(), self.config.temperature, prefix[t]);
                (prefix[t], lp)
            } else {
                sample_masked(row, mask.data(), self.config.temperature, rng)
            };
            seq.push(id);
            log_probs.push(lp);
            if id == EOS {
                break;
            }
            input = id;
        }
        Ok((seq, log_probs))
    }

    /// Mean negative log-likelihood per symbol over a corpus.
    pub fn mean_nll(&self, corpus: &[TokenSequence]) -> Result<f64, GenError> {
        let mut total = 0.0;
        let mut count = 0usize;
        for ts in corpus {
            let targets = ts.ids(true);
            self.check_ids(&targets)?;
            let mut sess = Session::new();
            let lp = self.sequence_log_probs(&mut sess, &targets)?;
            total -= sess.tape.value(lp).data().iter().sum::<f64>();
            count += targets.len();
        }
        Ok(total / count.max(1) as f64)
    }

    /// Likelihood pre-training. Entry 0 of the returned curve is the
    /// initial corpus perplexity; each later entry follows one epoch.
    pub fn pretrain_mle(
        &mut self,
        corpus: &[TokenSequence],
        epochs: usize,
        batch_size: usize,
        opt: &mut Optimizer,
        seed: u64,
    ) -> Result<Vec<f64>, GenError> {
        let mut curve = vec![self.mean_nll(corpus)?.exp()];
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        for epoch in 0..epochs {
            let mut rng = indexed_rng(seed, "mle-epoch", &[epoch as u64]);
            order.shuffle(&mut rng);
            let mut epoch_nll = 0.0;
            let mut epoch_tokens = 0usize;
            for chunk in order.chunks(batch_size.max(1)) {
                let inv = 1.0 / chunk.len() as f64;
                for &i in chunk {
                    let targets = corpus[i].ids(true);
                    self.check_ids(&targets)?;
                    let mut sess = Session::new();
                    let lp = self.sequence_log_probs(&mut sess, &targets)?;
                    epoch_nll -= sess.tape.value(lp).data().iter().sum::<f64>();
                    epoch_tokens += targets.len();
                    let s = sess.tape.sum(lp);
                    let loss = sess.tape.scale(s, -inv);
                    sess.backprop(loss, &mut self.params)?;
                }
                opt.step(&mut self.params)?;
            }
            curve.push((epoch_nll / epoch_tokens.max(1) as f64).exp());
        }
        Ok(curve)
    }

    /// One policy-gradient ascent step on `batch` with per-position rewards.
    /// Returns the surrogate loss `-(1/B) * sum_i R_i * log p_i`.
    pub fn policy_gradient_step(
        &mut self,
        batch: &SampledBatch,
        rewards: &[Vec<f64>],
        opt: &mut Optimizer,
        center_rewards: bool,
    ) -> Result<f64, GenError> {
        if rewards.len() != batch.sequences.len() {
            return Err(GenError::RewardMismatch {
                got: rewards.len(),
                want: batch.sequences.len(),
            });
        }
        for (seq, r) in batch.sequences.iter().zip(rewards) {
            if seq.len() != r.len() {
                return Err(GenError::RewardMismatch {
                    got: r.len(),
                    want: seq.len(),
                });
            }
        }
        let baseline = if center_rewards {
            let n: usize = rewards.iter().map(|r| r.len()).sum();
            let s: f64 = rewards.iter().flat_map(|r| r.iter()).sum();
            s / n.max(1) as f64
        } else {
            0.0
        };
        let inv = 1.0 / batch.sequences.len().max(1) as f64;
        let mut total = 0.0;
        for (seq, reward) in batch.sequences.iter().zip(rewards) {
            self.check_ids(seq)?;
            let mut sess = Session::new();
            let lp = self.sequence_log_probs(&mut sess, seq)?;
            let shifted: Vec<f64> = reward.iter().map(|r| r - baseline).collect();
            let r = sess.constant(Tensor::from_vec(shifted));
            let weighted = sess.tape.mul(lp, r)?;
            let s = sess.tape.sum(weighted);
            let loss = sess.tape.scale(s, -inv);
            total += sess.backprop(loss, &mut self.params)?;
        }
        opt.step(&mut self.params)?;
        Ok(total)
    }
}

fn masked_log_prob(logits: &[f64], mask: &[f64], temperature: f64, id: u32) -> f64 {
    let probs = masked_probs(logits, mask, temperature);
    probs[id as usize].max(1e-300).ln().min(0.0)
}

fn masked_probs(logits: &[f64], mask: &[f64], temperature: f64) -> Vec<f64> {
    if temperature <= 0.0 {
        // Degenerate distribution on the argmax of the masked logits.
        let mut best = 0usize;
        let mut best_v = f64::NEG_INFINITY;
        for (i, (&l, &m)) in logits.iter().zip(mask).enumerate() {
            let v = l + m;
            if v > best_v {
                best_v = v;
                best = i;
            }
        }
        let mut p = vec![0.0; logits.len()];
        p[best] = 1.0;
        return p;
    }
    let scaled: Vec<f64> = logits
        .iter()
        .zip(mask)
        .map(|(&l, &m)| (l + m) / temperature)
        .collect();
    let mx = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = scaled.iter().map(|&v| (v - mx).exp()).collect();
    let z: f64 = probs.iter().sum();
    for p in probs.iter_mut() {
        *p /= z;
    }
    probs
}

fn sample_masked(
    logits: &[f64],
    mask: &[f64],
    temperature: f64,
    rng: &mut impl Rng,
) -> (u32, f64) {
    let probs = masked_probs(logits, mask, temperature);
    let draw: f64 = rng.gen();
    let mut acc = 0.0;
    let mut chosen = probs.len() - 1;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if draw < acc {
            chosen = i;
            break;
        }
    }
    // Guard against picking a masked symbol through rounding at acc ~ 1.
    if probs[chosen] == 0.0 {
        chosen = probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite probs"))
            .map(|(i, _)| i)
            .expect("non-empty distribution");
    }
    (chosen as u32, probs[chosen].max(1e-300).ln().min(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{encode, AnnotatedUtterance, Vocabulary};
    use crate::num::stream_rng;

    fn toy_corpus() -> (Vec<TokenSequence>, Vocabulary) {
        let texts = [
            ("set an alarm", "alarm", "set"),
            ("set an alarm now", "alarm", "set"),
            ("cancel the alarm", "alarm", "cancel"),
            ("will it rain", "weather", "find"),
        ];
        let us: Vec<AnnotatedUtterance> = texts
            .iter()
            .map(|(t, d, i)| {
                AnnotatedUtterance::new(
                    t.split_whitespace().map(str::to_string).collect(),
                    d,
                    i,
                    vec![],
                )
                .unwrap()
            })
            .collect();
        let vocab = Vocabulary::build(&us).unwrap();
        let seqs = us
            .iter()
            .map(|u| encode(u, &vocab, 8, false).unwrap())
            .collect();
        (seqs, vocab)
    }

    #[test]
    fn samples_are_structurally_valid() {
        let (_, vocab) = toy_corpus();
        let gen = Generator::new(vocab.clone(), GeneratorConfig { max_len: 5, ..Default::default() }, 7);
        let mut rng = stream_rng(7, "test-sample");
        let batch = gen.sample(50, None, &mut rng).unwrap();
        for (seq, lps) in batch.sequences.iter().zip(&batch.step_log_probs) {
            assert_eq!(seq.len(), lps.len());
            assert!(lps.iter().all(|&l| l <= 0.0));
            assert!(vocab.is_header(seq[0]), "first symbol must be a header");
            crate::corpus::decode_ids(seq, &vocab).expect("sample decodes");
            let body_len = seq.len() - 1 - usize::from(*seq.last().unwrap() == EOS);
            assert!(body_len >= 1 && body_len <= 5);
        }
    }

    #[test]
    fn argmax_sampling_is_deterministic() {
        let (_, vocab) = toy_corpus();
        let mut cfg = GeneratorConfig::default();
        cfg.temperature = 0.0;
        cfg.max_len = 6;
        let gen = Generator::new(vocab, cfg, 3);
        let mut rng1 = stream_rng(1, "a");
        let mut rng2 = stream_rng(2, "b");
        let b1 = gen.sample(3, None, &mut rng1).unwrap();
        let b2 = gen.sample(3, None, &mut rng2).unwrap();
        assert_eq!(b1.sequences[0], b2.sequences[0]);
        assert_eq!(b1.sequences[0], b1.sequences[2]);
    }

    #[test]
    fn seed_prefix_is_respected() {
        let (seqs, vocab) = toy_corpus();
        let gen = Generator::new(vocab, GeneratorConfig { max_len: 8, ..Default::default() }, 9);
        let full = seqs[0].ids(false);
        let mut rng = stream_rng(4, "prefix");
        let batch = gen.sample(5, Some(&full), &mut rng).unwrap();
        for seq in &batch.sequences {
            assert!(seq.starts_with(&full));
        }
    }

    #[test]
    fn rollouts_leave_parameters_untouched_and_extend_prefix() {
        let (seqs, vocab) = toy_corpus();
        let gen = Generator::new(vocab, GeneratorConfig { max_len: 6, ..Default::default() }, 5);
        let before = gen.params.value_hash();
        let prefix = &seqs[0].ids(false)[..2];
        let outs = gen.rollouts(prefix, 8, 11, &[0]).unwrap();
        assert_eq!(outs.len(), 8);
        for o in &outs {
            assert!(o.starts_with(prefix));
        }
        assert_eq!(gen.params.value_hash(), before);
    }

    #[test]
    fn rollout_of_terminated_prefix_errors() {
        let (seqs, vocab) = toy_corpus();
        let gen = Generator::new(vocab, GeneratorConfig::default(), 5);
        let prefix = seqs[0].ids(true);
        assert!(matches!(
            gen.rollouts(&prefix, 2, 1, &[0]),
            Err(GenError::PrefixTerminated)
        ));
    }

    #[test]
    fn boundary_prefix_adds_at_most_one_symbol_before_end() {
        let (_, vocab) = toy_corpus();
        let cfg = GeneratorConfig { max_len: 4, ..Default::default() };
        let gen = Generator::new(vocab.clone(), cfg, 5);
        // Prefix: header + max_len - 1 body symbols.
        let header = vocab.header_ids()[0];
        let body: u32 = (crate::corpus::NUM_SPECIALS..vocab.size() as u32)
            .find(|&id| vocab.is_body(id))
            .unwrap();
        let mut prefix = vec![header];
        prefix.extend(std::iter::repeat(body).take(3));
        let outs = gen.rollouts(&prefix, 20, 3, &[0]).unwrap();
        for o in &outs {
            // At most one more body symbol, then the forced end marker.
            assert!(o.len() <= prefix.len() + 2);
            assert_eq!(*o.last().unwrap(), EOS);
        }
    }

    #[test]
    fn memorizes_a_single_sequence() {
        let (seqs, vocab) = toy_corpus();
        let corpus = vec![seqs[0].clone()];
        let mut gen = Generator::new(
            vocab,
            GeneratorConfig { embed_dim: 16, hidden_dim: 32, max_len: 8, temperature: 1.0 },
            13,
        );
        let mut opt = Optimizer::adam(0.01);
        let curve = gen.pretrain_mle(&corpus, 200, 4, &mut opt, 17).unwrap();
        let nll = gen.mean_nll(&corpus).unwrap();
        assert!(nll < 0.05, "final per-token NLL {} too high", nll);
        assert!(curve.last().unwrap() < &curve[0]);
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let (seqs, vocab) = toy_corpus();
        let mut gen = Generator::new(vocab, GeneratorConfig::default(), 21);
        let before = gen.params.value_hash();
        let mut opt = Optimizer::adam(0.01);
        let curve = gen.pretrain_mle(&seqs, 0, 4, &mut opt, 1).unwrap();
        assert_eq!(curve.len(), 1);
        assert!(curve[0].is_finite());
        assert_eq!(gen.params.value_hash(), before);
    }

    #[test]
    fn empirical_frequencies_match_step_distribution() {
        let (_, vocab) = toy_corpus();
        let gen = Generator::new(vocab.clone(), GeneratorConfig { max_len: 4, ..Default::default() }, 2);
        let dist = gen.step_distribution(&[]).unwrap();
        let mut rng = stream_rng(8, "freq");
        let batch = gen.sample(10_000, None, &mut rng).unwrap();
        let mut counts = vec![0usize; vocab.size()];
        for seq in &batch.sequences {
            counts[seq[0] as usize] += 1;
        }
        for (id, &p) in dist.iter().enumerate() {
            let f = counts[id] as f64 / 10_000.0;
            assert!(
                (f - p).abs() < 0.02,
                "symbol {}: frequency {} vs probability {}",
                id,
                f,
                p
            );
        }
    }

    #[test]
    fn zero_rewards_leave_parameters_unchanged() {
        let (_, vocab) = toy_corpus();
        let mut gen = Generator::new(vocab, GeneratorConfig::default(), 31);
        let before = gen.params.value_hash();
        let mut rng = stream_rng(5, "pg");
        let batch = gen.sample(4, None, &mut rng).unwrap();
        let rewards: Vec<Vec<f64>> = batch.sequences.iter().map(|s| vec![0.0; s.len()]).collect();
        let mut opt = Optimizer::sgd(0.5).without_clipping();
        gen.policy_gradient_step(&batch, &rewards, &mut opt, false)
            .unwrap();
        assert_eq!(gen.params.value_hash(), before);
    }

    #[test]
    fn unit_rewards_match_mle_step() {
        let (_, vocab) = toy_corpus();
        let mut rng = stream_rng(5, "pg-mle");
        let make = || Generator::new(vocab.clone(), GeneratorConfig::default(), 77);
        let gen0 = make();
        let batch = gen0.sample(3, None, &mut rng).unwrap();

        // Policy-gradient path with rewards fixed at 1 and no centering.
        let mut gen_pg = make();
        let rewards: Vec<Vec<f64>> = batch.sequences.iter().map(|s| vec![1.0; s.len()]).collect();
        let mut opt1 = Optimizer::sgd(0.1).without_clipping();
        gen_pg
            .policy_gradient_step(&batch, &rewards, &mut opt1, false)
            .unwrap();

        // Supervised path: mean over sequences of summed NLL.
        let mut gen_mle = make();
        let inv = 1.0 / batch.sequences.len() as f64;
        for seq in &batch.sequences {
            let mut sess = Session::new();
            let lp = gen_mle.sequence_log_probs(&mut sess, seq).unwrap();
            let s = sess.tape.sum(lp);
            let loss = sess.tape.scale(s, -inv);
            sess.backprop(loss, &mut gen_mle.params).unwrap();
        }
        let mut opt2 = Optimizer::sgd(0.1).without_clipping();
        opt2.step(&mut gen_mle.params).unwrap();

        for (a, b) in gen_pg.params.iter().zip(gen_mle.params.iter()) {
            for (x, y) in a.value.data().iter().zip(b.value.data()) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn misaligned_rewards_error() {
        let (_, vocab) = toy_corpus();
        let mut gen = Generator::new(vocab, GeneratorConfig::default(), 1);
        let mut rng = stream_rng(5, "bad");
        let batch = gen.sample(1, None, &mut rng).unwrap();
        let rewards = vec![vec![1.0; batch.sequences[0].len() + 1]];
        let mut opt = Optimizer::sgd(0.1);
        assert!(matches!(
            gen.policy_gradient_step(&batch, &rewards, &mut opt, false),
            Err(GenError::RewardMismatch { .. })
        ));
    }
}
