//! Subword vocabularies learned from raw Unicode text: byte-pair encoding and
//! unigram language-model segmentation.
//!
//! Text is split on single spaces (input is expected to be normalized) and
//! each word is prefixed with [`MARKER`] before segmentation, so decoding can
//! restore word boundaries. Pieces never span a word boundary.

mod bpe;
mod unigram;

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use bpe::train_bpe;
pub use unigram::{train_unigram, UnigramConfig};

pub const MARKER: char = '\u{2581}';
pub const UNK_GLYPH: char = '\u{2047}';

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const BOS_ID: u32 = 2;
pub const EOS_ID: u32 = 3;
pub const NUM_SPECIAL: usize = 4;
const SPECIAL_PIECES: [&str; NUM_SPECIAL] = ["<pad>", "<unk>", "<s>", "</s>"];

pub const VOCAB_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VocabKind {
    Bpe,
    Unigram,
}

impl std::str::FromStr for VocabKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bpe" => Ok(VocabKind::Bpe),
            "unigram" => Ok(VocabKind::Unigram),
            other => Err(Error::validation(format!(
                "unknown tokenizer kind {other:?} (expected bpe or unigram)"
            ))),
        }
    }
}

/// Token ids of one text plus the count of real (non-pad) tokens.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub length: usize,
}

impl TokenSequence {
    pub fn new(ids: Vec<u32>) -> Self {
        let length = ids.len();
        TokenSequence { ids, length }
    }

    pub fn is_empty(&self) -> bool {
        self.length == 0
    }

    /// Truncates or right-pads with `PAD_ID` to exactly `len` ids.
    pub fn padded(&self, len: usize) -> TokenSequence {
        let mut ids: Vec<u32> = self.ids.iter().copied().take(len).collect();
        ids.resize(len, PAD_ID);
        TokenSequence {
            ids,
            length: self.length.min(len),
        }
    }

    pub fn real_ids(&self) -> &[u32] {
        &self.ids[..self.length]
    }
}

/// A learned subword inventory. Ids `0..4` are the special tokens
/// `pad, unk, bos, eos`; learned pieces follow.
#[derive(Debug, Clone, PartialEq)]
pub struct SubwordVocab {
    kind: VocabKind,
    pieces: Vec<String>,
    merges: Vec<(String, String)>,
    log_probs: Vec<f64>,
    piece_ids: HashMap<String, u32>,
    merge_ranks: HashMap<(u32, u32), (usize, u32)>,
    merge_pairs: Vec<(u32, u32)>,
    max_piece_chars: usize,
    min_log_prob: f64,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    version: u32,
    kind: VocabKind,
    pieces: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    merges: Option<Vec<(String, String)>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    log_probs: Option<Vec<f64>>,
    marker: String,
}

impl SubwordVocab {
    fn build(
        kind: VocabKind,
        learned: Vec<String>,
        merges: Vec<(String, String)>,
        learned_log_probs: Vec<f64>,
    ) -> Result<Self> {
        let mut pieces: Vec<String> = SPECIAL_PIECES.iter().map(|s| s.to_string()).collect();
        pieces.extend(learned);
        let mut piece_ids = HashMap::new();
        for (i, p) in pieces.iter().enumerate().skip(NUM_SPECIAL) {
            if p.is_empty() {
                return Err(Error::validation(format!("vocabulary piece {i} is empty")));
            }
            if piece_ids.insert(p.clone(), i as u32).is_some() {
                return Err(Error::validation(format!("duplicate vocabulary piece {p:?}")));
            }
        }
        let mut merge_ranks = HashMap::new();
        let mut merge_pairs = Vec::new();
        for (rank, (a, b)) in merges.iter().enumerate() {
            let lookup = |p: &str| {
                piece_ids.get(p).copied().ok_or_else(|| {
                    Error::validation(format!("merge {rank} references unknown piece {p:?}"))
                })
            };
            let (ia, ib) = (lookup(a)?, lookup(b)?);
            let merged = lookup(&format!("{a}{b}"))?;
            merge_ranks.entry((ia, ib)).or_insert((rank, merged));
            merge_pairs.push((ia, ib));
        }
        let mut log_probs = vec![0.0; NUM_SPECIAL];
        if kind == VocabKind::Unigram {
            if learned_log_probs.len() != pieces.len() - NUM_SPECIAL {
                return Err(Error::validation("log_probs length differs from piece count"));
            }
            if let Some(bad) = learned_log_probs.iter().find(|lp| !lp.is_finite() || **lp > 0.0) {
                return Err(Error::validation(format!(
                    "unigram log-probabilities must be finite and ≤ 0, found {bad}"
                )));
            }
            log_probs.extend(learned_log_probs);
        }
        let max_piece_chars = pieces[NUM_SPECIAL..]
            .iter()
            .map(|p| p.chars().count())
            .max()
            .unwrap_or(1);
        let min_log_prob = log_probs[NUM_SPECIAL..]
            .iter()
            .copied()
            .fold(0.0, f64::min);
        Ok(SubwordVocab {
            kind,
            pieces,
            merges,
            log_probs,
            piece_ids,
            merge_ranks,
            merge_pairs,
            max_piece_chars,
            min_log_prob,
        })
    }

    pub(crate) fn from_bpe(learned: Vec<String>, merges: Vec<(String, String)>) -> Result<Self> {
        Self::build(VocabKind::Bpe, learned, merges, Vec::new())
    }

    /// Unigram vocabulary from learned pieces and their log-probabilities.
    pub fn from_unigram(learned: Vec<String>, log_probs: Vec<f64>) -> Result<Self> {
        Self::build(VocabKind::Unigram, learned, Vec::new(), log_probs)
    }

    pub fn kind(&self) -> VocabKind {
        self.kind
    }

    /// All pieces, specials first.
    pub fn pieces(&self) -> &[String] {
        &self.pieces
    }

    pub fn learned_pieces(&self) -> &[String] {
        &self.pieces[NUM_SPECIAL..]
    }

    pub fn learned_len(&self) -> usize {
        self.pieces.len() - NUM_SPECIAL
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn learned_log_probs(&self) -> &[f64] {
        &self.log_probs[NUM_SPECIAL..]
    }

    pub fn log_prob(&self, id: u32) -> f64 {
        self.log_probs.get(id as usize).copied().unwrap_or(0.0)
    }

    pub fn piece(&self, id: u32) -> &str {
        &self.pieces[id as usize]
    }

    /// Id of a learned piece. Special tokens are not looked up by text.
    pub fn piece_id(&self, piece: &str) -> Option<u32> {
        self.piece_ids.get(piece).copied()
    }

    pub(crate) fn merge_rank(&self, a: u32, b: u32) -> Option<(usize, u32)> {
        self.merge_ranks.get(&(a, b)).copied()
    }

    pub(crate) fn merge_pair_ids(&self, rank: usize) -> (u32, u32) {
        self.merge_pairs[rank]
    }

    pub(crate) fn max_piece_chars(&self) -> usize {
        self.max_piece_chars
    }

    pub(crate) fn min_log_prob(&self) -> f64 {
        self.min_log_prob
    }

    /// Segments one word, which must already carry the boundary marker.
    pub fn encode_word(&self, word: &str) -> Vec<u32> {
        match self.kind {
            VocabKind::Bpe => bpe::encode_word(self, word),
            VocabKind::Unigram => unigram::viterbi(self, word).0,
        }
    }

    /// Maximum-score segmentation of a marker-prefixed word and its total
    /// log-probability (unigram vocabularies).
    pub fn viterbi_word(&self, word: &str) -> (Vec<u32>, f64) {
        unigram::viterbi(self, word)
    }

    /// Encodes normalized text. No bos/eos are added.
    pub fn encode(&self, text: &str) -> TokenSequence {
        let ids = words(text)
            .flat_map(|w| self.encode_word(&w))
            .collect();
        TokenSequence::new(ids)
    }

    /// Samples a segmentation per word from the unigram lattice, with scores
    /// scaled by `alpha`.
    pub fn sample_encode<R: Rng + ?Sized>(&self, text: &str, alpha: f64, rng: &mut R) -> Result<TokenSequence> {
        if self.kind != VocabKind::Unigram {
            return Err(Error::validation("subword sampling requires a unigram vocabulary"));
        }
        let ids = words(text)
            .flat_map(|w| unigram::sample(self, &w, alpha, rng))
            .collect();
        Ok(TokenSequence::new(ids))
    }

    pub fn decode(&self, seq: &TokenSequence) -> Result<String> {
        let mut out = String::new();
        for &id in seq.real_ids() {
            if id as usize >= self.pieces.len() {
                return Err(Error::validation(format!(
                    "token id {id} out of range for vocabulary of {}",
                    self.pieces.len()
                )));
            }
            match id {
                PAD_ID | BOS_ID | EOS_ID => {}
                UNK_ID => out.push(UNK_GLYPH),
                _ => out.extend(self.pieces[id as usize].chars().map(|c| if c == MARKER { ' ' } else { c })),
            }
        }
        Ok(out.strip_prefix(' ').map(str::to_string).unwrap_or(out))
    }

    pub fn to_json(&self) -> Result<String> {
        let file = VocabFile {
            version: VOCAB_FORMAT_VERSION,
            kind: self.kind,
            pieces: self.pieces.clone(),
            merges: (self.kind == VocabKind::Bpe).then(|| self.merges.clone()),
            log_probs: (self.kind == VocabKind::Unigram).then(|| self.log_probs.clone()),
            marker: MARKER.to_string(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: VocabFile = serde_json::from_str(s)?;
        if file.version != VOCAB_FORMAT_VERSION {
            return Err(Error::Version {
                what: "vocabulary",
                found: file.version,
                expected: VOCAB_FORMAT_VERSION,
            });
        }
        if file.marker != MARKER.to_string() {
            return Err(Error::validation(format!("unsupported boundary marker {:?}", file.marker)));
        }
        if file.pieces.len() < NUM_SPECIAL || file.pieces[..NUM_SPECIAL] != SPECIAL_PIECES {
            return Err(Error::validation("vocabulary must start with <pad> <unk> <s> </s>"));
        }
        let learned = file.pieces[NUM_SPECIAL..].to_vec();
        match file.kind {
            VocabKind::Bpe => Self::from_bpe(learned, file.merges.unwrap_or_default()),
            VocabKind::Unigram => {
                let lp = file
                    .log_probs
                    .ok_or_else(|| Error::validation("unigram vocabulary lacks log_probs"))?;
                if lp.len() != file.pieces.len() {
                    return Err(Error::validation("log_probs length differs from pieces"));
                }
                Self::from_unigram(learned, lp[NUM_SPECIAL..].to_vec())
            }
        }
    }

    /// SHA-256 of the JSON form.
    pub fn content_hash(&self) -> Result<String> {
        Ok(crate::binio::sha256_hex(self.to_json()?.as_bytes()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}

fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(' ').filter(|w| !w.is_empty()).map(|w| {
        let mut s = String::with_capacity(w.len() + 3);
        s.push(MARKER);
        s.push_str(w);
        s
    })
}

/// Marker-prefixed word frequencies, sorted by word.
pub(crate) fn word_counts(corpus: &[String]) -> Result<BTreeMap<String, u64>> {
    let mut counts = BTreeMap::new();
    for line in corpus {
        for w in words(line) {
            *counts.entry(w).or_default() += 1;
        }
    }
    if counts.is_empty() {
        return Err(Error::validation("tokenizer training corpus is empty"));
    }
    Ok(counts)
}

/// Trains a vocabulary of the requested kind.
pub fn train(corpus: &[String], kind: VocabKind, vocab_size: usize, unigram: &UnigramConfig) -> Result<SubwordVocab> {
    match kind {
        VocabKind::Bpe => train_bpe(corpus, vocab_size),
        VocabKind::Unigram => train_unigram(corpus, vocab_size, unigram),
    }
}
