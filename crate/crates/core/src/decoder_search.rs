//! Beam search over the decoder with length-normalized scores.
//!
//! A hypothesis scores `log p / len^α`, where `len` counts generated tokens
//! including `<eos>`. At every step the `beam_size` best expansions by raw
//! log-probability survive (ties to the older hypothesis, then
//! the lower token id); those ending in
//! `<eos>` retire. Search stops once `beam_size` hypotheses have finished or
//! `max_len` tokens have been generated.

use std::cmp::Ordering;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::corpus_io::{BOS, PAD, PLACEHOLDER, SEP, UNK};
use crate::error::{Error, Result};
use crate::model::autograd::Graph;
use crate::model::{EncodedInput, SaTransformer};
use crate::subword::Vocab;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeamConfig {
    pub beam_size: usize,
    pub max_len: usize,
    pub alpha: f64,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig { beam_size: 4, max_len: 32, alpha: 0.6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    /// Generated ids without `<bos>` and `<eos>`.
    pub tokens: Vec<u32>,
    pub log_prob: f64,
    pub score: f64,
    pub finished: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub hypotheses: Vec<Hypothesis>,
    /// No hypothesis reached `<eos>` within `max_len`.
    pub truncated: bool,
}

/// Token ids the decoder may emit, besides `<eos>`.
#[derive(Debug, Clone)]
pub struct OutputMask {
    banned: Vec<bool>,
}

impl OutputMask {
    /// Bans padding, `<unk>`, `<bos>`, separators and placeholders.
    pub fn for_vocab(vocab: &Vocab) -> Self {
        let mut banned = vec![false; vocab.len()];
        for sym in [PAD, UNK, BOS, SEP, PLACEHOLDER] {
            if let Some(id) = vocab.get(sym) {
                banned[id as usize] = true;
            }
        }
        OutputMask { banned }
    }

    pub fn allow_all(vocab_size: usize) -> Self {
        OutputMask { banned: vec![false; vocab_size] }
    }

    fn allowed(&self, id: usize) -> bool {
        !self.banned.get(id).copied().unwrap_or(true)
    }
}

fn normalized(log_prob: f64, len: usize, alpha: f64) -> f64 {
    if alpha == 0.0 {
        log_prob
    } else {
        log_prob / (len.max(1) as f64).powf(alpha)
    }
}

fn by_score(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Frozen encoder output for one input, reused across decoding steps.
pub struct Encoded<'m> {
    model: &'m SaTransformer,
    memory: Array2<f64>,
}

impl<'m> Encoded<'m> {
    pub fn new(model: &'m SaTransformer, input: &EncodedInput) -> Result<Self> {
        let mut g = Graph::new(model.params());
        let mem = model.encode(&mut g, &input.ids, &input.segments, &input.positions, &[0..input.len()], &mut None)?;
        Ok(Encoded { model, memory: g.value(mem).clone() })
    }

    /// Next-token log-probabilities for each prefix (each starting with
    /// `<bos>`), one row per prefix.
    pub fn next_log_probs(&self, prefixes: &[Vec<u32>]) -> Result<Array2<f64>> {
        let mut g = Graph::new(self.model.params());
        let mem = g.constant(self.memory.clone());
        let mut ids = Vec::new();
        let mut ranges = Vec::with_capacity(prefixes.len());
        for p in prefixes {
            let start = ids.len();
            ids.extend(p);
            ranges.push(start..ids.len());
        }
        let mem_ranges = vec![0..self.memory.nrows(); prefixes.len()];
        let logits = self.model.decode(&mut g, mem, &mem_ranges, &ids, &ranges, &mut None)?;
        let lv = g.value(logits);
        let mut out = Array2::zeros((prefixes.len(), lv.ncols()));
        for (k, r) in ranges.iter().enumerate() {
            let row = lv.row(r.end - 1);
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = m + row.fold(0.0, |a, &v| a + (v - m).exp()).ln();
            out.row_mut(k).assign(&row.mapv(|v| v - lse));
        }
        Ok(out)
    }
}

pub fn beam_search(
    model: &SaTransformer,
    input: &EncodedInput,
    cfg: &BeamConfig,
    bos: u32,
    eos: u32,
    mask: &OutputMask,
) -> Result<SearchResult> {
    if cfg.beam_size == 0 || cfg.max_len == 0 {
        return Err(Error::Config("beam_size and max_len must be at least 1".into()));
    }
    let enc = Encoded::new(model, input)?;
    let mut live: Vec<(Vec<u32>, f64)> = vec![(vec![], 0.0)];
    let mut finished: Vec<Hypothesis> = Vec::new();

    for step in 0..cfg.max_len {
        let prefixes: Vec<Vec<u32>> = live
            .iter()
            .map(|(t, _)| std::iter::once(bos).chain(t.iter().copied()).collect())
            .collect();
        let lp = enc.next_log_probs(&prefixes)?;
        // (raw log-prob, hypothesis index, token)
        let mut cands: Vec<(f64, usize, usize)> = Vec::with_capacity(live.len() * lp.ncols());
        for (h, (_, base)) in live.iter().enumerate() {
            for (t, &l) in lp.row(h).iter().enumerate() {
                if t == eos as usize || mask.allowed(t) {
                    cands.push((base + l, h, t));
                }
            }
        }
        cands.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(Ordering::Equal)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        let want = cfg.beam_size - finished.len();
        let mut next = Vec::with_capacity(want);
        for &(logp, h, t) in cands.iter().take(want) {
            let mut tokens = live[h].0.clone();
            if t == eos as usize {
                let len = tokens.len() + 1;
                finished.push(Hypothesis { tokens, log_prob: logp, score: normalized(logp, len, cfg.alpha), finished: true });
            } else {
                tokens.push(t as u32);
                next.push((tokens, logp));
            }
        }
        live = next;
        if finished.len() >= cfg.beam_size || live.is_empty() {
            break;
        }
        if step + 1 == cfg.max_len && finished.is_empty() {
            let mut hyps: Vec<Hypothesis> = live
                .into_iter()
                .map(|(tokens, log_prob)| {
                    let len = tokens.len();
                    Hypothesis { tokens, log_prob, score: normalized(log_prob, len, cfg.alpha), finished: false }
                })
                .collect();
            hyps.sort_by(by_score);
            return Ok(SearchResult { hypotheses: hyps, truncated: true });
        }
    }
    finished.sort_by(by_score);
    finished.truncate(cfg.beam_size);
    Ok(SearchResult { hypotheses: finished, truncated: false })
}

/// Argmax rollout under the same output mask.
pub fn greedy(
    model: &SaTransformer,
    input: &EncodedInput,
    max_len: usize,
    bos: u32,
    eos: u32,
    mask: &OutputMask,
) -> Result<Hypothesis> {
    let enc = Encoded::new(model, input)?;
    let mut tokens = Vec::new();
    let mut log_prob = 0.0;
    for _ in 0..max_len {
        let prefix: Vec<u32> = std::iter::once(bos).chain(tokens.iter().copied()).collect();
        let lp = enc.next_log_probs(&[prefix])?;
        let mut best: Option<(usize, f64)> = None;
        for (t, &l) in lp.row(0).iter().enumerate() {
            if (t == eos as usize || mask.allowed(t)) && best.is_none_or(|(_, b)| l > b) {
                best = Some((t, l));
            }
        }
        let (t, l) = best.expect("eos is always allowed");
        log_prob += l;
        if t == eos as usize {
            return Ok(Hypothesis { score: log_prob, log_prob, tokens, finished: true });
        }
        tokens.push(t as u32);
    }
    Ok(Hypothesis { score: log_prob, log_prob, tokens, finished: false })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Batch, Flags, ModelConfig, Pair};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny(seed: u64) -> SaTransformer {
        let cfg = ModelConfig {
            d_model: 16,
            n_heads: 2,
            encoder_layers: 1,
            decoder_layers: 1,
            ffn_dim: 32,
            dropout: 0.0,
            max_positions: 64,
            vocab_size: 14,
            flags: Flags::ALL,
        };
        SaTransformer::new(cfg, seed).unwrap()
    }

    fn random_input(rng: &mut ChaCha8Rng) -> EncodedInput {
        let n = rng.random_range(2..6);
        EncodedInput {
            ids: (0..n).map(|_| rng.random_range(6..14)).collect(),
            segments: (0..n).map(|k| (k >= n / 2) as u8).collect(),
            positions: (0..n).map(|k| if k >= n / 2 { k - n / 2 } else { k }).collect(),
        }
    }

    #[test]
    fn beam_one_is_greedy() {
        let model = tiny(1);
        let mask = OutputMask::allow_all(14);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let x = random_input(&mut rng);
            let cfg = BeamConfig { beam_size: 1, max_len: 6, alpha: 0.6 };
            let b = beam_search(&model, &x, &cfg, 2, 3, &mask).unwrap();
            let g = greedy(&model, &x, 6, 2, 3, &mask).unwrap();
            assert_eq!(b.hypotheses[0].tokens, g.tokens);
            assert_eq!(b.truncated, !g.finished);
            assert!((b.hypotheses[0].log_prob - g.log_prob).abs() < 1e-12);
        }
    }

    #[test]
    fn scores_descend_and_are_normalized() {
        let model = tiny(2);
        let mask = OutputMask::allow_all(14);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let x = random_input(&mut rng);
            let cfg = BeamConfig { beam_size: 4, max_len: 8, alpha: 0.6 };
            let r = beam_search(&model, &x, &cfg, 2, 3, &mask).unwrap();
            assert!(r.hypotheses.len() <= 4);
            assert!(r.hypotheses.windows(2).all(|w| w[0].score >= w[1].score));
            for h in r.hypotheses.iter().filter(|h| h.finished) {
                let len = (h.tokens.len() + 1) as f64;
                assert!((h.score - h.log_prob / len.powf(0.6)).abs() < 1e-12);
            }
            let again = beam_search(&model, &x, &cfg, 2, 3, &mask).unwrap();
            assert_eq!(r, again);
        }
    }

    #[test]
    fn truncation_flag_when_nothing_finishes() {
        let model = tiny(3);
        let mask = OutputMask::allow_all(14);
        // an end id outside the vocabulary can never be emitted
        let cfg = BeamConfig { beam_size: 2, max_len: 1, alpha: 0.6 };
        let x = EncodedInput { ids: vec![7, 8], segments: vec![0, 1], positions: vec![0, 0] };
        let r = beam_search(&model, &x, &cfg, 2, 99, &mask).unwrap();
        assert!(r.truncated);
        assert_eq!(r.hypotheses.len(), 2);
        assert!(r.hypotheses.iter().all(|h| !h.finished && h.tokens.len() == 1));
    }

    #[test]
    fn zero_beam_rejected() {
        let model = tiny(3);
        let x = EncodedInput { ids: vec![7], segments: vec![0], positions: vec![0] };
        let cfg = BeamConfig { beam_size: 0, ..Default::default() };
        assert!(beam_search(&model, &x, &cfg, 2, 3, &OutputMask::allow_all(14)).is_err());
    }

    #[test]
    fn fitted_model_emits_memorized_target_and_empty_suggestion() {
        let mut model = tiny(4);
        let a = Pair { input: EncodedInput { ids: vec![7, 8, 4, 5], segments: vec![0, 0, 0, 1], positions: vec![0, 1, 2, 0] }, target: vec![9] };
        let b = Pair { input: EncodedInput { ids: vec![10, 11, 4, 5], segments: vec![0, 0, 0, 1], positions: vec![0, 1, 2, 0] }, target: vec![] };
        let batch = Batch::new(&[&a, &b], 2, 3);
        let mut vel: Vec<_> = model.params().tensors().map(|t| t.clone() * 0.0).collect();
        for _ in 0..400 {
            let (_, g) = model.loss_and_gradients(&batch, None).unwrap();
            for ((p, v), gr) in model.params_mut().tensors_mut().zip(&mut vel).zip(&g.grads) {
                *v = &*v * 0.9 + gr;
                *p -= &(&*v * 0.05);
            }
        }
        let mask = OutputMask::allow_all(14);
        let cfg = BeamConfig::default();
        let ra = beam_search(&model, &a.input, &cfg, 2, 3, &mask).unwrap();
        assert_eq!(ra.hypotheses[0].tokens, vec![9]);
        assert!(ra.hypotheses[0].log_prob.exp() > 0.95);
        let rb = beam_search(&model, &b.input, &cfg, 2, 3, &mask).unwrap();
        assert!(rb.hypotheses[0].tokens.is_empty());
    }

    #[test]
    fn alpha_reranks_crafted_hypotheses() {
        // short: log p = -1.0 over 1 token; long: log p = -1.2 over 3 tokens
        let short = |a| normalized(-1.0, 1, a);
        let long = |a| normalized(-1.2, 3, a);
        assert!(short(0.0) > long(0.0));
        assert!(long(1.0) > short(1.0));
        assert!((long(1.0) + 0.4).abs() < 1e-15);
    }
}
