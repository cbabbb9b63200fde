//! Unigram language-model segmentation: EM training with vocabulary pruning,
//! Viterbi decoding and lattice sampling.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{word_counts, SubwordVocab, UNK_ID};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UnigramConfig {
    /// Longest seed substring, in characters (boundary marker included).
    pub max_piece_len: usize,
    pub em_iterations: usize,
    /// Seed substrings occurring fewer times than this are dropped.
    pub seed_min_freq: u64,
    /// Cap on the number of multi-character seed pieces.
    pub seed_limit: usize,
    /// Fraction of pieces kept per pruning round.
    pub shrink_factor: f64,
}

impl Default for UnigramConfig {
    fn default() -> Self {
        UnigramConfig {
            max_piece_len: 6,
            em_iterations: 4,
            seed_min_freq: 2,
            seed_limit: 200_000,
            shrink_factor: 0.75,
        }
    }
}

impl UnigramConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_piece_len < 1 {
            return Err(Error::validation("tokenizer.unigram.max_piece_len must be ≥ 1"));
        }
        if self.em_iterations < 1 {
            return Err(Error::validation("tokenizer.unigram.em_iterations must be ≥ 1"));
        }
        if !(self.shrink_factor > 0.0 && self.shrink_factor < 1.0) {
            return Err(Error::validation("tokenizer.unigram.shrink_factor must be in (0, 1)"));
        }
        Ok(())
    }
}

/// Working model during training: pieces are strings, not vocabulary ids.
struct Model {
    pieces: Vec<String>,
    log_probs: Vec<f64>,
    is_char: Vec<bool>,
    index: HashMap<String, usize>,
    max_len: usize,
}

impl Model {
    fn new(pieces: Vec<(String, f64)>) -> Self {
        let total: f64 = pieces.iter().map(|(_, c)| c).sum();
        let mut m = Model {
            pieces: Vec::new(),
            log_probs: Vec::new(),
            is_char: Vec::new(),
            index: HashMap::new(),
            max_len: 1,
        };
        for (p, c) in pieces {
            let n = p.chars().count();
            m.max_len = m.max_len.max(n);
            m.index.insert(p.clone(), m.pieces.len());
            m.is_char.push(n == 1);
            m.log_probs.push((c / total).ln());
            m.pieces.push(p);
        }
        m
    }

    /// Candidate pieces ending at each char boundary: `(start, piece index)`.
    fn lattice(&self, word: &str) -> (Vec<usize>, Vec<Vec<(usize, usize)>>) {
        let bounds: Vec<usize> = word
            .char_indices()
            .map(|(i, _)| i)
            .chain(std::iter::once(word.len()))
            .collect();
        let n = bounds.len() - 1;
        let mut ends = vec![Vec::new(); n + 1];
        for end in 1..=n {
            for start in end.saturating_sub(self.max_len)..end {
                if let Some(&pi) = self.index.get(&word[bounds[start]..bounds[end]]) {
                    ends[end].push((start, pi));
                }
            }
        }
        (bounds, ends)
    }

    /// Adds expected piece counts for one word (weighted by `count`) and
    /// returns the word's log marginal likelihood.
    fn expected_counts(&self, word: &str, count: f64, acc: &mut [f64]) -> f64 {
        let (_, ends) = self.lattice(word);
        let n = ends.len() - 1;
        let mut alpha = vec![f64::NEG_INFINITY; n + 1];
        alpha[0] = 0.0;
        for end in 1..=n {
            alpha[end] = log_sum_exp(ends[end].iter().map(|&(s, p)| alpha[s] + self.log_probs[p]));
        }
        let mut beta = vec![f64::NEG_INFINITY; n + 1];
        beta[n] = 0.0;
        for end in (1..=n).rev() {
            for &(s, p) in &ends[end] {
                beta[s] = log_sum_exp([beta[s], beta[end] + self.log_probs[p]].into_iter());
            }
        }
        let z = alpha[n];
        if !z.is_finite() {
            return z;
        }
        for end in 1..=n {
            for &(s, p) in &ends[end] {
                let post = (alpha[s] + self.log_probs[p] + beta[end] - z).exp();
                acc[p] += count * post;
            }
        }
        z
    }

    fn viterbi(&self, word: &str) -> Vec<usize> {
        let (_, ends) = self.lattice(word);
        let n = ends.len() - 1;
        let mut best = vec![(f64::NEG_INFINITY, usize::MAX, usize::MAX); n + 1];
        best[0].0 = 0.0;
        for end in 1..=n {
            for &(s, p) in &ends[end] {
                let score = best[s].0 + self.log_probs[p];
                if score > best[end].0 {
                    best[end] = (score, s, p);
                }
            }
        }
        let mut out = Vec::new();
        let mut pos = n;
        while pos > 0 {
            let (_, s, p) = best[pos];
            if p == usize::MAX {
                return Vec::new();
            }
            out.push(p);
            pos = s;
        }
        out.reverse();
        out
    }

    fn em_step(&mut self, words: &[(String, f64)]) {
        let mut acc = vec![0.0; self.pieces.len()];
        for (w, c) in words {
            self.expected_counts(w, *c, &mut acc);
        }
        self.set_from_counts(&acc);
    }

    /// M-step. Characters keep a small floor so that every word stays
    /// segmentable.
    fn set_from_counts(&mut self, counts: &[f64]) {
        let floored: Vec<f64> = counts
            .iter()
            .zip(&self.is_char)
            .map(|(&c, &ch)| if ch { c.max(1e-3) } else { c })
            .collect();
        let total: f64 = floored.iter().sum();
        self.log_probs = floored
            .iter()
            .map(|&c| if c > 0.0 { (c / total).ln() } else { f64::NEG_INFINITY })
            .collect();
    }

    /// Keeps all characters plus the `keep` multi-character pieces whose
    /// removal would cost the most likelihood.
    fn prune(&self, words: &[(String, f64)], keep: usize) -> Vec<(String, f64)> {
        let mut usage = vec![0.0f64; self.pieces.len()];
        for (w, c) in words {
            for p in self.viterbi(w) {
                usage[p] += c;
            }
        }
        let mut scored: Vec<(f64, usize)> = Vec::new();
        for (i, p) in self.pieces.iter().enumerate() {
            if self.is_char[i] || !self.log_probs[i].is_finite() {
                continue;
            }
            // cost of re-segmenting every use of the piece without it
            let alt = self.best_without(p, i);
            let loss = usage[i] * (self.log_probs[i] - alt);
            scored.push((loss, i));
        }
        scored.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then_with(|| self.pieces[a.1].cmp(&self.pieces[b.1]))
        });
        let kept: BTreeSet<usize> = scored.iter().take(keep).map(|&(_, i)| i).collect();
        (0..self.pieces.len())
            .filter(|i| self.is_char[*i] || kept.contains(i))
            .map(|i| (self.pieces[i].clone(), self.log_probs[i].exp().max(1e-12)))
            .collect()
    }

    fn best_without(&self, piece: &str, skip: usize) -> f64 {
        let (_, ends) = self.lattice(piece);
        let n = ends.len() - 1;
        let mut best = vec![f64::NEG_INFINITY; n + 1];
        best[0] = 0.0;
        for end in 1..=n {
            for &(s, p) in &ends[end] {
                if p != skip {
                    best[end] = best[end].max(best[s] + self.log_probs[p]);
                }
            }
        }
        best[n]
    }

    fn learned_len(&self) -> usize {
        self.pieces.len()
    }
}

fn log_sum_exp(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Trains a unigram vocabulary of `vocab_size` learned pieces (special tokens
/// excluded).
pub fn train_unigram(corpus: &[String], vocab_size: usize, config: &UnigramConfig) -> Result<SubwordVocab> {
    config.validate()?;
    let counts = word_counts(corpus)?;
    let chars: BTreeMap<char, u64> = counts.iter().fold(BTreeMap::new(), |mut m, (w, &c)| {
        for ch in w.chars() {
            *m.entry(ch).or_default() += c;
        }
        m
    });
    if vocab_size <= chars.len() {
        return Err(Error::validation(format!(
            "vocab_size {vocab_size} must exceed the {} distinct characters (boundary marker included)",
            chars.len()
        )));
    }

    // seed: frequent substrings of 2..=max_piece_len characters
    let mut subs: HashMap<&str, u64> = HashMap::new();
    for (w, &c) in &counts {
        let bounds: Vec<usize> = w.char_indices().map(|(i, _)| i).chain([w.len()]).collect();
        let n = bounds.len() - 1;
        for s in 0..n {
            for e in (s + 2)..=(s + config.max_piece_len).min(n) {
                *subs.entry(&w[bounds[s]..bounds[e]]).or_default() += c;
            }
        }
    }
    let mut seed: Vec<(&str, u64)> = subs
        .into_iter()
        .filter(|&(_, c)| c >= config.seed_min_freq)
        .collect();
    seed.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    seed.truncate(config.seed_limit);
    seed.sort_by(|a, b| a.0.cmp(b.0));

    let mut initial: Vec<(String, f64)> = chars.iter().map(|(c, &n)| (c.to_string(), n as f64)).collect();
    initial.extend(seed.into_iter().map(|(s, c)| (s.to_string(), c as f64)));
    let words: Vec<(String, f64)> = counts.iter().map(|(w, &c)| (w.clone(), c as f64)).collect();

    let mut model = Model::new(initial);
    loop {
        for _ in 0..config.em_iterations {
            model.em_step(&words);
        }
        if model.learned_len() <= vocab_size {
            break;
        }
        let n_chars = model.is_char.iter().filter(|&&c| c).count();
        let multi = model.learned_len() - n_chars;
        let budget = vocab_size - n_chars;
        let keep = budget.max((multi as f64 * config.shrink_factor) as usize);
        let keep = keep.min(multi.saturating_sub(1));
        model = Model::new(model.prune(&words, keep));
    }
    // drop pieces EM gave no mass, keeping characters
    let mut final_pieces: Vec<(String, f64)> = model
        .pieces
        .iter()
        .zip(&model.log_probs)
        .zip(&model.is_char)
        .filter(|((_, lp), &ch)| ch || lp.is_finite())
        .map(|((p, lp), _)| (p.clone(), lp.exp()))
        .collect();
    let total: f64 = final_pieces.iter().map(|(_, p)| p).sum();
    for (_, p) in &mut final_pieces {
        *p /= total;
    }
    final_pieces.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let (pieces, probs): (Vec<String>, Vec<f64>) = final_pieces.into_iter().unzip();
    SubwordVocab::from_unigram(pieces, probs.into_iter().map(f64::ln).collect())
}

/// Best segmentation of one marker-prefixed word under the vocabulary's piece
/// log-probabilities, and its total score. Characters missing from the
/// vocabulary become `unk` with a fixed penalty.
pub(crate) fn viterbi(vocab: &SubwordVocab, word: &str) -> (Vec<u32>, f64) {
    let (bounds, cands) = lattice(vocab, word);
    let n = bounds.len() - 1;
    let mut best = vec![(f64::NEG_INFINITY, 0usize, 0u32); n + 1];
    best[0].0 = 0.0;
    for end in 1..=n {
        for &(s, id, lp) in &cands[end] {
            let score = best[s].0 + lp;
            if score > best[end].0 {
                best[end] = (score, s, id);
            }
        }
    }
    let mut ids = Vec::new();
    let mut pos = n;
    while pos > 0 {
        let (_, s, id) = best[pos];
        ids.push(id);
        pos = s;
    }
    ids.reverse();
    (ids, best[n].0)
}

/// Samples a segmentation with probability proportional to
/// `exp(alpha · score)` (forward filtering, backward sampling).
pub(crate) fn sample<R: Rng + ?Sized>(vocab: &SubwordVocab, word: &str, alpha: f64, rng: &mut R) -> Vec<u32> {
    let (bounds, cands) = lattice(vocab, word);
    let n = bounds.len() - 1;
    let mut fwd = vec![f64::NEG_INFINITY; n + 1];
    fwd[0] = 0.0;
    for end in 1..=n {
        fwd[end] = log_sum_exp(cands[end].iter().map(|&(s, _, lp)| fwd[s] + alpha * lp));
    }
    let mut ids = Vec::new();
    let mut pos = n;
    while pos > 0 {
        let weights: Vec<f64> = cands[pos]
            .iter()
            .map(|&(s, _, lp)| (fwd[s] + alpha * lp - fwd[pos]).exp())
            .collect();
        let mut u: f64 = rng.gen::<f64>() * weights.iter().sum::<f64>();
        let mut choice = cands[pos].len() - 1;
        for (i, w) in weights.iter().enumerate() {
            if u < *w {
                choice = i;
                break;
            }
            u -= w;
        }
        let (s, id, _) = cands[pos][choice];
        ids.push(id);
        pos = s;
    }
    ids.reverse();
    ids
}

type Lattice = (Vec<usize>, Vec<Vec<(usize, u32, f64)>>);

fn lattice(vocab: &SubwordVocab, word: &str) -> Lattice {
    let bounds: Vec<usize> = word.char_indices().map(|(i, _)| i).chain([word.len()]).collect();
    let n = bounds.len() - 1;
    let unk_score = vocab.min_log_prob() - 10.0;
    let mut cands = vec![Vec::new(); n + 1];
    for end in 1..=n {
        for start in end.saturating_sub(vocab.max_piece_chars())..end {
            if let Some(id) = vocab.piece_id(&word[bounds[start]..bounds[end]]) {
                cands[end].push((start, id, vocab.log_prob(id)));
            } else if end - start == 1 {
                cands[end].push((start, UNK_ID, unk_score));
            }
        }
    }
    (bounds, cands)
}
