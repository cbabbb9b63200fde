//! Independent tokenizer oracles: a naive BPE pair counter and exhaustive
//! unigram segmentation.

use std::collections::BTreeMap;

use cmsenti::subword::{SubwordVocab, MARKER};

pub const ALPHABET: &[char] = &['a', 'b', 'c', 'n', 'ப', 'ட', 'ம', 'é'];

pub fn training_corpus() -> Vec<String> {
    // every alphabet character occurs, plus some recurring words
    let mut c = vec![ALPHABET.iter().collect::<String>()];
    c.extend(
        ["ban ban can", "பட்டம் ban", "ம ம டப", "cab abc éna", "nana banana"]
            .iter()
            .map(|s| s.to_string()),
    );
    c
}

/// Replays training with a naive pair counter, checking that every recorded
/// merge had maximal frequency and won ties lexicographically.
pub fn check_merges_against_oracle(corpus: &[String], merges: &[(String, String)]) -> Result<(), String> {
    let mut words: BTreeMap<Vec<String>, u64> = BTreeMap::new();
    for w in corpus[0].split(' ').filter(|w| !w.is_empty()) {
        let pieces = std::iter::once(MARKER)
            .chain(w.chars())
            .map(|c| c.to_string())
            .collect();
        *words.entry(pieces).or_default() += 1;
    }
    for (a, b) in merges {
        let mut counts: BTreeMap<(String, String), u64> = BTreeMap::new();
        for (w, n) in &words {
            for p in w.windows(2) {
                *counts.entry((p[0].clone(), p[1].clone())).or_default() += n;
            }
        }
        let Some(max) = counts.values().copied().max() else {
            return Err(format!("merge ({a}, {b}) recorded with no pairs left"));
        };
        let first_max = counts.iter().find(|(_, c)| **c == max).unwrap().0;
        if max < 2 {
            return Err(format!("merge ({a}, {b}) recorded at frequency {max}"));
        }
        if (a, b) != (&first_max.0, &first_max.1) {
            return Err(format!("merge ({a}, {b}) but oracle picks ({}, {}) at {max}", first_max.0, first_max.1));
        }
        words = words
            .into_iter()
            .map(|(w, n)| {
                let mut out = Vec::new();
                let mut i = 0;
                while i < w.len() {
                    if i + 1 < w.len() && &w[i] == a && &w[i + 1] == b {
                        out.push(format!("{a}{b}"));
                        i += 2;
                    } else {
                        out.push(w[i].clone());
                        i += 1;
                    }
                }
                (out, n)
            })
            .fold(BTreeMap::new(), |mut acc, (w, n)| {
                *acc.entry(w).or_default() += n;
                acc
            });
    }
    Ok(())
}

/// Best total log-probability over every segmentation of `chars`.
pub fn exhaustive_best(v: &SubwordVocab, chars: &[char]) -> f64 {
    if chars.is_empty() {
        return 0.0;
    }
    let mut best = f64::NEG_INFINITY;
    for len in 1..=chars.len() {
        let piece: String = chars[..len].iter().collect();
        if let Some(id) = v.piece_id(&piece) {
            best = best.max(v.log_prob(id) + exhaustive_best(v, &chars[len..]));
        }
    }
    best
}
