//! Caption metrics and attention inspection.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::hash::Hash;
use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::stem::stem;
use crate::tensor::{gemm, Tensor};

const STOPWORDS_FILE: &str = include_str!("../data/stopwords.txt");

/// Version tag from the stop-word file header.
pub fn stopwords_version() -> &'static str {
    STOPWORDS_FILE
        .lines()
        .next()
        .and_then(|l| l.strip_prefix("# stopwords "))
        .unwrap_or("unversioned")
}

pub fn stopwords() -> &'static BTreeSet<String> {
    static SET: OnceLock<BTreeSet<String>> = OnceLock::new();
    SET.get_or_init(|| {
        STOPWORDS_FILE
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(str::to_string)
            .collect()
    })
}

/// Lowercases, drops apostrophes, splits on any other non-alphanumeric
/// character, removes stop words and stems. Idempotent.
pub fn normalize(sentence: &str) -> Vec<String> {
    let stops = stopwords();
    let lowered: String = sentence
        .to_lowercase()
        .chars()
        .filter(|c| *c != '\'' && *c != '\u{2019}')
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect();
    lowered
        .split_whitespace()
        .filter(|w| !stops.contains(*w))
        .map(stem)
        .filter(|w| !stops.contains(w))
        .collect()
}

pub fn normalize_corpus(lines: &[&str]) -> Vec<Vec<String>> {
    lines.iter().map(|l| normalize(l)).collect()
}

fn empty_corpus() -> Error {
    Error::Data("corpus is empty after normalization".into())
}

/// Percentage of caption tokens that occur in the paired transcript.
pub fn scr(captions: &[Vec<String>], transcripts: &[Vec<String>]) -> Result<f64> {
    if captions.len() != transcripts.len() {
        return Err(Error::Data(format!(
            "{} captions but {} transcripts",
            captions.len(),
            transcripts.len()
        )));
    }
    let mut covered = 0usize;
    let mut total = 0usize;
    for (cap, tr) in captions.iter().zip(transcripts) {
        let words: BTreeSet<&str> = tr.iter().map(String::as_str).collect();
        covered += cap.iter().filter(|w| words.contains(w.as_str())).count();
        total += cap.len();
    }
    if total == 0 {
        return Err(empty_corpus());
    }
    Ok(100.0 * covered as f64 / total as f64)
}

/// Raw word counts of a normalized corpus.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FreqTable {
    pub counts: BTreeMap<String, u64>,
    pub total: u64,
}

impl FreqTable {
    pub fn from_corpus(sentences: &[Vec<String>]) -> Self {
        let mut t = FreqTable::default();
        for w in sentences.iter().flatten() {
            *t.counts.entry(w.clone()).or_insert(0) += 1;
            t.total += 1;
        }
        t
    }

    pub fn count(&self, w: &str) -> u64 {
        self.counts.get(w).copied().unwrap_or(0)
    }

    /// Every count multiplied by `k`.
    pub fn scaled(&self, k: u64) -> Self {
        FreqTable {
            counts: self.counts.iter().map(|(w, c)| (w.clone(), c * k)).collect(),
            total: self.total * k,
        }
    }
}

/// Weight of the uniform distribution mixed into each relative frequency.
pub const ARS_SMOOTHING: f64 = 0.01;

/// `(1 - lambda) * count / total + lambda / vocab`; scale-free in the counts.
pub fn smoothed_freq(count: u64, total: u64, vocab: usize, lambda: f64) -> f64 {
    let rel = if total == 0 { 0.0 } else { count as f64 / total as f64 };
    (1.0 - lambda) * rel + lambda / vocab.max(1) as f64
}

fn union_size(a: &FreqTable, b: &FreqTable) -> usize {
    a.counts.keys().chain(b.counts.keys()).collect::<BTreeSet<_>>().len()
}

/// `max(ln(f_a / f_i), 0)` over smoothed relative frequencies.
pub fn ars_word(w: &str, freq_a: &FreqTable, freq_i: &FreqTable) -> f64 {
    let u = union_size(freq_a, freq_i);
    let fa = smoothed_freq(freq_a.count(w), freq_a.total, u, ARS_SMOOTHING);
    let fi = smoothed_freq(freq_i.count(w), freq_i.total, u, ARS_SMOOTHING);
    (fa / fi).ln().max(0.0)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ArsTable {
    pub scores: BTreeMap<String, f64>,
}

impl ArsTable {
    pub fn build(freq_a: &FreqTable, freq_i: &FreqTable) -> Self {
        let u = union_size(freq_a, freq_i);
        let scores = freq_a
            .counts
            .keys()
            .chain(freq_i.counts.keys())
            .map(|w| {
                let fa = smoothed_freq(freq_a.count(w), freq_a.total, u, ARS_SMOOTHING);
                let fi = smoothed_freq(freq_i.count(w), freq_i.total, u, ARS_SMOOTHING);
                (w.clone(), (fa / fi).ln().max(0.0))
            })
            .collect();
        ArsTable { scores }
    }

    pub fn score(&self, w: &str) -> f64 {
        self.scores.get(w).copied().unwrap_or(0.0)
    }

    /// Words by descending score, ties alphabetical.
    pub fn ranked(&self) -> Vec<(&str, f64)> {
        let mut v: Vec<(&str, f64)> = self.scores.iter().map(|(w, s)| (w.as_str(), *s)).collect();
        v.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        v
    }
}

/// Sum of word scores; repeated words count each time.
pub fn ars_sentence(tokens: &[String], table: &ArsTable) -> f64 {
    tokens.iter().map(|w| table.score(w)).sum()
}

/// Mean sentence score over sentences that kept at least one token.
pub fn ars_corpus(sentences: &[Vec<String>], table: &ArsTable) -> Result<f64> {
    let kept: Vec<&Vec<String>> = sentences.iter().filter(|s| !s.is_empty()).collect();
    if kept.is_empty() {
        return Err(empty_corpus());
    }
    Ok(kept.iter().map(|s| ars_sentence(s, table)).sum::<f64>() / kept.len() as f64)
}

fn ngram_counts<T: Hash + Eq + Clone>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for g in tokens.windows(n) {
            *m.entry(g).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU-4: clipped 1..4-gram precisions (clip = max count over
/// references), uniform geometric mean, brevity penalty against the closest
/// reference length (shorter on ties). No smoothing.
pub fn bleu4<T: Hash + Eq + Clone>(hypotheses: &[Vec<T>], references: &[Vec<Vec<T>>]) -> Result<f64> {
    if hypotheses.is_empty() {
        return Err(Error::Data("BLEU needs at least one hypothesis".into()));
    }
    if hypotheses.len() != references.len() {
        return Err(Error::Data(format!(
            "{} hypotheses but {} reference sets",
            hypotheses.len(),
            references.len()
        )));
    }
    let mut matched = [0usize; 4];
    let mut possible = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, refs) in hypotheses.iter().zip(references) {
        if refs.is_empty() {
            return Err(Error::Data("hypothesis without references".into()));
        }
        hyp_len += h.len();
        ref_len += refs
            .iter()
            .map(Vec::len)
            .min_by_key(|&l| (l.abs_diff(h.len()), l))
            .expect("non-empty");
        for n in 1..=4 {
            let hc = ngram_counts(h, n);
            let mut clip: HashMap<&[T], usize> = HashMap::new();
            for r in refs {
                for (g, c) in ngram_counts(r, n) {
                    let e = clip.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            for (g, c) in &hc {
                matched[n - 1] += (*c).min(clip.get(g).copied().unwrap_or(0));
            }
            possible[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    if matched.iter().zip(&possible).any(|(&m, &p)| m == 0 || p == 0) {
        return Ok(0.0);
    }
    let log_p: f64 = matched
        .iter()
        .zip(&possible)
        .map(|(&m, &p)| (m as f64 / p as f64).ln())
        .sum::<f64>()
        / 4.0;
    let bp = if hyp_len > ref_len { 1.0 } else { (1.0 - ref_len as f64 / hyp_len as f64).exp() };
    Ok(bp * log_p.exp())
}

/// Fraction of pairs that match exactly.
pub fn exact_match<T: PartialEq>(hyps: &[Vec<T>], refs: &[Vec<T>]) -> f64 {
    if hyps.is_empty() {
        return 0.0;
    }
    hyps.iter().zip(refs).filter(|(h, r)| h == r).count() as f64 / hyps.len() as f64
}

/// Position-wise matches up to the shorter length, over total reference tokens.
pub fn token_accuracy<T: PartialEq>(hyps: &[Vec<T>], refs: &[Vec<T>]) -> f64 {
    let total: usize = refs.iter().map(Vec::len).sum();
    if total == 0 {
        return 0.0;
    }
    let hits: usize = hyps
        .iter()
        .zip(refs)
        .map(|(h, r)| h.iter().zip(r).filter(|(a, b)| a == b).count())
        .sum();
    hits as f64 / total as f64
}

fn check_stochastic(m: &Tensor, layer: usize) -> Result<usize> {
    let s = m.shape();
    if s.len() != 2 || s[0] != s[1] {
        return Err(Error::InvalidShape(format!("attention layer {layer} has shape {s:?}, expected square")));
    }
    for r in 0..s[0] {
        let row = m.row(r);
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-6 || row.iter().any(|&x| x < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "attention layer {layer} row {r} is not a distribution (sums to {sum})"
            )));
        }
    }
    Ok(s[0])
}

/// `0.5 * A + 0.5 * I`, rows renormalized.
pub fn residual_adjust(a: &Tensor) -> Tensor {
    let n = a.shape()[0];
    let mut out = a.clone();
    let d = out.data_mut();
    for r in 0..n {
        let row = &mut d[r * n..(r + 1) * n];
        row.iter_mut().for_each(|x| *x *= 0.5);
        row[r] += 0.5;
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|x| *x /= s);
    }
    out
}

/// Cumulative rollout after each layer; the last entry is the full rollout
/// `Â_L ... Â_1`.
pub fn attention_rollout_steps(layers: &[Tensor]) -> Result<Vec<Tensor>> {
    let mut out: Vec<Tensor> = Vec::with_capacity(layers.len());
    let mut n0 = None;
    for (i, a) in layers.iter().enumerate() {
        let n = check_stochastic(a, i)?;
        if *n0.get_or_insert(n) != n {
            return Err(Error::InvalidShape("attention layers differ in size".into()));
        }
        let adj = residual_adjust(a);
        let next = match out.last() {
            None => adj,
            Some(prev) => {
                let mut c = Tensor::zeros(&[n, n]);
                gemm(n, n, n, adj.data(), false, prev.data(), false, c.data_mut(), 0.0);
                c
            }
        };
        out.push(next);
    }
    Ok(out)
}

pub fn attention_rollout(layers: &[Tensor]) -> Result<Tensor> {
    if layers.is_empty() {
        return Err(Error::InvalidArgument("rollout needs at least one layer".into()));
    }
    Ok(attention_rollout_steps(layers)?.pop().expect("non-empty"))
}

/// Sums the rollout rows of the selected output tokens into one saliency
/// value per source token.
pub fn aggregate_saliency(rollout: &Tensor, rows: &[usize]) -> Result<Vec<f64>> {
    let n = rollout.shape()[0];
    let mut out = vec![0.0; n];
    for &r in rows {
        if r >= n {
            return Err(Error::Index { what: "rollout row", index: r, size: n });
        }
        out.iter_mut().zip(rollout.row(r)).for_each(|(o, x)| *o += x);
    }
    Ok(out)
}
