//! Greedy and beam-search decoding over any next-token scorer.
//!
//! PAD and both start tokens are never generated. A hypothesis finishes on
//! EOS or when it reaches `max_len` tokens. Beam candidates are ranked by
//! cumulative log-probability, then by lexicographically smaller ids; the
//! returned hypothesis maximizes the mean per-token log-probability.

use std::cmp::Ordering;

use crate::captioner::CaptionerModel;
use crate::data::{BOS1, BOS2, EOS, PAD};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Log-probabilities of the next token for equal-length prefixes.
pub trait StepScorer {
    fn vocab_size(&self) -> usize;
    fn log_probs(&mut self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>>;
}

/// Scores continuations of one sample's fused memory with a model.
pub struct ModelScorer<'a> {
    pub model: &'a CaptionerModel,
    pub memory: Tensor,
}

impl StepScorer for ModelScorer<'_> {
    fn vocab_size(&self) -> usize {
        self.model.config().vocab.output_size()
    }

    fn log_probs(&mut self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        self.model.next_log_probs(&self.memory, prefixes)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Generated ids, EOS included when emitted.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
}

impl Hypothesis {
    /// Mean log-probability per generated token.
    pub fn score(&self) -> f64 {
        self.log_prob / self.tokens.len() as f64
    }

    pub fn finished(&self, max_len: usize) -> bool {
        self.tokens.last() == Some(&EOS) || self.tokens.len() >= max_len
    }
}

fn generable(t: usize) -> bool {
    t != PAD && t != BOS1 && t != BOS2
}

fn by_rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.log_prob.total_cmp(&a.log_prob).then_with(|| a.tokens.cmp(&b.tokens))
}

fn by_final(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score().total_cmp(&a.score()).then_with(|| a.tokens.cmp(&b.tokens))
}

/// Argmax at each step; ties go to the lowest id.
pub fn greedy_decode(scorer: &mut dyn StepScorer, max_len: usize) -> Result<Hypothesis> {
    if max_len == 0 {
        return Err(Error::InvalidArgument("max_len must be at least 1".into()));
    }
    let mut hyp = Hypothesis { tokens: Vec::new(), log_prob: 0.0 };
    while !hyp.finished(max_len) {
        let lp = scorer.log_probs(std::slice::from_ref(&hyp.tokens))?.remove(0);
        let mut best: Option<(usize, f64)> = None;
        for (t, &x) in lp.iter().enumerate() {
            if generable(t) && best.is_none_or(|(_, b)| x > b) {
                best = Some((t, x));
            }
        }
        let (t, x) = best.ok_or_else(|| Error::InvalidArgument("no generable token".into()))?;
        hyp.tokens.push(t);
        hyp.log_prob += x;
    }
    Ok(hyp)
}

pub fn beam_search(scorer: &mut dyn StepScorer, width: usize, max_len: usize) -> Result<Hypothesis> {
    if width == 0 || max_len == 0 {
        return Err(Error::InvalidArgument("beam width and max_len must be at least 1".into()));
    }
    let mut alive = vec![Hypothesis { tokens: Vec::new(), log_prob: 0.0 }];
    let mut done: Vec<Hypothesis> = Vec::new();
    while !alive.is_empty() {
        let prefixes: Vec<Vec<usize>> = alive.iter().map(|h| h.tokens.clone()).collect();
        let scores = scorer.log_probs(&prefixes)?;
        let mut candidates = Vec::with_capacity(alive.len() * scorer.vocab_size());
        for (h, lp) in alive.iter().zip(&scores) {
            for (t, &x) in lp.iter().enumerate() {
                if generable(t) {
                    let mut tokens = h.tokens.clone();
                    tokens.push(t);
                    candidates.push(Hypothesis { tokens, log_prob: h.log_prob + x });
                }
            }
        }
        candidates.sort_by(by_rank);
        candidates.truncate(width);
        alive.clear();
        for c in candidates {
            if c.finished(max_len) {
                done.push(c);
            } else {
                alive.push(c);
            }
        }
    }
    done.sort_by(by_final);
    done.into_iter().next().ok_or_else(|| Error::InvalidArgument("beam search produced nothing".into()))
}
