use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap};

use crate::error::{Error, Result};

use super::{word_counts, SubwordVocab};

type Pair = (u32, u32);

struct Word {
    symbols: Vec<u32>,
    count: u64,
}

/// Learns merges greedily: the most frequent adjacent pair wins, ties go to
/// the lexicographically smallest `(left, right)` piece pair. Stops at
/// `vocab_size` learned pieces or when no pair occurs at least twice.
pub fn train_bpe(corpus: &[String], vocab_size: usize) -> Result<SubwordVocab> {
    let counts = word_counts(corpus)?;
    let chars: BTreeSet<char> = counts.keys().flat_map(|w| w.chars()).collect();
    if vocab_size <= chars.len() {
        return Err(Error::validation(format!(
            "vocab_size {vocab_size} must exceed the {} distinct characters (boundary marker included)",
            chars.len()
        )));
    }

    let mut pieces: Vec<String> = chars.iter().map(|c| c.to_string()).collect();
    let char_id: HashMap<char, u32> = chars.iter().enumerate().map(|(i, &c)| (c, i as u32)).collect();
    let mut words: Vec<Word> = counts
        .iter()
        .map(|(w, &count)| Word {
            symbols: w.chars().map(|c| char_id[&c]).collect(),
            count,
        })
        .collect();

    let mut pair_counts: HashMap<Pair, u64> = HashMap::new();
    let mut pair_words: HashMap<Pair, BTreeSet<usize>> = HashMap::new();
    for (wi, w) in words.iter().enumerate() {
        for p in w.symbols.windows(2) {
            let pair = (p[0], p[1]);
            *pair_counts.entry(pair).or_default() += w.count;
            pair_words.entry(pair).or_default().insert(wi);
        }
    }

    let mut heap = BinaryHeap::new();
    let key = |pieces: &[String], pair: Pair, count: u64| {
        (
            count,
            Reverse((pieces[pair.0 as usize].clone(), pieces[pair.1 as usize].clone())),
            pair,
        )
    };
    for (&pair, &c) in &pair_counts {
        heap.push(key(&pieces, pair, c));
    }

    let mut merges = Vec::new();
    while pieces.len() < vocab_size {
        let Some((count, _, pair)) = heap.pop() else { break };
        if pair_counts.get(&pair).copied().unwrap_or(0) != count {
            continue; // stale entry
        }
        if count < 2 {
            break;
        }
        let new_id = pieces.len() as u32;
        let merged = format!("{}{}", pieces[pair.0 as usize], pieces[pair.1 as usize]);
        merges.push((pieces[pair.0 as usize].clone(), pieces[pair.1 as usize].clone()));
        pieces.push(merged);

        let affected: Vec<usize> = pair_words.remove(&pair).unwrap_or_default().into_iter().collect();
        let mut touched: BTreeMap<Pair, ()> = BTreeMap::new();
        for wi in affected {
            let w = &mut words[wi];
            if !w.symbols.windows(2).any(|p| (p[0], p[1]) == pair) {
                continue;
            }
            for p in w.symbols.windows(2) {
                let old = (p[0], p[1]);
                let c = pair_counts.get_mut(&old).expect("pair tracked");
                *c -= w.count;
                touched.insert(old, ());
            }
            w.symbols = merge_pair(&w.symbols, pair, new_id);
            for p in w.symbols.windows(2) {
                let new = (p[0], p[1]);
                *pair_counts.entry(new).or_default() += w.count;
                pair_words.entry(new).or_default().insert(wi);
                touched.insert(new, ());
            }
        }
        for (p, ()) in touched {
            let c = pair_counts[&p];
            if c == 0 {
                pair_counts.remove(&p);
            } else if p != pair {
                heap.push(key(&pieces, p, c));
            }
        }
        pair_counts.remove(&pair);
    }

    SubwordVocab::from_bpe(pieces, merges)
}

/// Replaces non-overlapping occurrences of `pair`, scanning left to right.
pub(crate) fn merge_pair(symbols: &[u32], pair: Pair, new_id: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && (symbols[i], symbols[i + 1]) == pair {
            out.push(new_id);
            i += 2;
        } else {
            out.push(symbols[i]);
            i += 1;
        }
    }
    out
}

/// Applies the learned merges to one marker-prefixed word. `symbol_ids` are
/// vocabulary ids of single characters, or `unk`.
pub(crate) fn encode_word(vocab: &SubwordVocab, word: &str) -> Vec<u32> {
    let mut symbols: Vec<u32> = word
        .chars()
        .map(|c| {
            let mut buf = [0u8; 4];
            vocab.piece_id(c.encode_utf8(&mut buf)).unwrap_or(super::UNK_ID)
        })
        .collect();
    loop {
        let best = symbols
            .windows(2)
            .filter_map(|p| vocab.merge_rank(p[0], p[1]))
            .min_by_key(|&(rank, _)| rank);
        let Some((rank, merged)) = best else { break };
        let pair = vocab.merge_pair_ids(rank);
        symbols = merge_pair(&symbols, pair, merged);
    }
    symbols
}
