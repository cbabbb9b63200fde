use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binio::{read_framed, sha256_hex, write_framed, Decoder, Encoder};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"CMSK";
pub const SKIPGRAM_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SkipgramConfig {
    pub dim: usize,
    pub lr: f64,
    pub window: usize,
    pub epochs: usize,
    pub negatives: usize,
    pub buckets: usize,
    pub min_n: usize,
    pub max_n: usize,
    pub seed: u64,
}

impl Default for SkipgramConfig {
    fn default() -> Self {
        SkipgramConfig {
            dim: 300,
            lr: 0.05,
            window: 5,
            epochs: 20,
            negatives: 5,
            buckets: 200_000,
            min_n: 3,
            max_n: 6,
            seed: 0,
        }
    }
}

impl SkipgramConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(Error::validation(format!("skipgram.{field}: {msg}")));
        if self.dim == 0 {
            return bad("dim", "must be at least 1");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("lr", "must be positive");
        }
        if self.window == 0 {
            return bad("window", "must be at least 1");
        }
        if self.epochs == 0 {
            return bad("epochs", "must be at least 1");
        }
        if self.buckets == 0 || self.buckets > u32::MAX as usize {
            return bad("buckets", "must be in 1..=2^32-1");
        }
        if self.min_n == 0 || self.min_n > self.max_n {
            return bad("min_n", "must satisfy 1 <= min_n <= max_n");
        }
        Ok(())
    }
}

/// Piece vectors, context vectors and hashed character n-gram vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct SkipgramTable {
    dim: usize,
    min_n: usize,
    max_n: usize,
    num_buckets: usize,
    pieces: Vec<String>,
    index: HashMap<String, usize>,
    input: Vec<f32>,
    output: Vec<f32>,
    buckets: Vec<f32>,
    loss_history: Vec<f64>,
}

fn fnv1a(bytes: &[u8]) -> u32 {
    let mut h: u32 = 0x811c_9dc5;
    for &b in bytes {
        h ^= b as u32;
        h = h.wrapping_mul(0x0100_0193);
    }
    h
}

/// Bucket indices of the character n-grams of `<piece>`, for n in
/// `min_n..=max_n`.
pub fn ngram_buckets(piece: &str, min_n: usize, max_n: usize, buckets: usize) -> Vec<usize> {
    let padded: Vec<char> = std::iter::once('<')
        .chain(piece.chars())
        .chain(std::iter::once('>'))
        .collect();
    let mut out = Vec::new();
    let mut buf = String::new();
    for n in min_n..=max_n {
        for w in padded.windows(n) {
            buf.clear();
            buf.extend(w);
            out.push(fnv1a(buf.as_bytes()) as usize % buckets);
        }
    }
    out
}

fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Skip-gram with negative sampling over subword piece sequences. The center
/// representation is the piece vector plus its n-gram bucket vectors; the
/// learning rate decays linearly to zero over all epochs.
pub fn train_skipgram(corpus: &[Vec<String>], config: &SkipgramConfig) -> Result<SkipgramTable> {
    config.validate()?;
    let mut counts: HashMap<&str, u64> = HashMap::new();
    for sent in corpus {
        for p in sent {
            *counts.entry(p.as_str()).or_default() += 1;
        }
    }
    if counts.is_empty() {
        return Err(Error::validation("skipgram corpus is empty"));
    }
    let mut vocab: Vec<(&str, u64)> = counts.into_iter().collect();
    vocab.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let pieces: Vec<String> = vocab.iter().map(|(p, _)| p.to_string()).collect();
    let index: HashMap<String, usize> = pieces.iter().enumerate().map(|(i, p)| (p.clone(), i)).collect();

    let d = config.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let bound = 1.0 / d as f32;
    let mut input: Vec<f32> = (0..pieces.len() * d).map(|_| rng.gen_range(-bound..bound)).collect();
    let mut buckets: Vec<f32> = (0..config.buckets * d).map(|_| rng.gen_range(-bound..bound)).collect();
    let mut output = vec![0.0f32; pieces.len() * d];

    let grams: Vec<Vec<usize>> = pieces
        .iter()
        .map(|p| ngram_buckets(p, config.min_n, config.max_n, config.buckets))
        .collect();
    let mut cumulative = Vec::with_capacity(vocab.len());
    let mut acc = 0.0f64;
    for &(_, c) in &vocab {
        acc += (c as f64).powf(0.75);
        cumulative.push(acc);
    }
    let sample_negative = |rng: &mut ChaCha8Rng| {
        let r = rng.gen::<f64>() * acc;
        cumulative.partition_point(|&c| c <= r).min(cumulative.len() - 1)
    };

    let sentences: Vec<Vec<usize>> = corpus
        .iter()
        .map(|s| s.iter().map(|p| index[p.as_str()]).collect())
        .collect();
    let n_tokens: usize = sentences.iter().map(Vec::len).sum();
    let total = (n_tokens * config.epochs) as f64;
    let mut processed = 0usize;
    let mut loss_history = Vec::with_capacity(config.epochs);
    let mut h = vec![0.0f32; d];
    let mut grad_h = vec![0.0f64; d];
    let mut targets = Vec::with_capacity(config.negatives + 1);

    for epoch in 0..config.epochs {
        let mut loss_sum = 0.0f64;
        let mut pairs = 0usize;
        for sent in &sentences {
            for (i, &center) in sent.iter().enumerate() {
                let lr = config.lr * (1.0 - processed as f64 / total);
                processed += 1;
                let b = rng.gen_range(1..=config.window);
                let lo = i.saturating_sub(b);
                let hi = (i + b).min(sent.len() - 1);
                for j in lo..=hi {
                    if j == i {
                        continue;
                    }
                    let ctx = sent[j];
                    h.copy_from_slice(&input[center * d..(center + 1) * d]);
                    for &g in &grams[center] {
                        for (hk, bk) in h.iter_mut().zip(&buckets[g * d..(g + 1) * d]) {
                            *hk += bk;
                        }
                    }
                    targets.clear();
                    targets.push((ctx, 1.0));
                    if pieces.len() > 1 {
                        for _ in 0..config.negatives {
                            let mut n = sample_negative(&mut rng);
                            while n == ctx {
                                n = sample_negative(&mut rng);
                            }
                            targets.push((n, 0.0));
                        }
                    }
                    grad_h.iter_mut().for_each(|g| *g = 0.0);
                    let mut pair_loss = 0.0f64;
                    for &(t, label) in &targets {
                        let out = &mut output[t * d..(t + 1) * d];
                        let s: f64 = h.iter().zip(out.iter()).map(|(&a, &b)| a as f64 * b as f64).sum();
                        pair_loss -= if label > 0.5 { log_sigmoid(s) } else { log_sigmoid(-s) };
                        let g = lr * (label - sigmoid(s));
                        for k in 0..d {
                            grad_h[k] += g * out[k] as f64;
                            out[k] += (g * h[k] as f64) as f32;
                        }
                    }
                    if !pair_loss.is_finite() {
                        return Err(Error::NonFinite(format!(
                            "skipgram loss at epoch {} (piece {:?})",
                            epoch + 1,
                            pieces[center]
                        )));
                    }
                    loss_sum += pair_loss;
                    pairs += 1;
                    for (v, g) in input[center * d..(center + 1) * d].iter_mut().zip(&grad_h) {
                        *v += *g as f32;
                    }
                    for &gi in &grams[center] {
                        for (v, g) in buckets[gi * d..(gi + 1) * d].iter_mut().zip(&grad_h) {
                            *v += *g as f32;
                        }
                    }
                }
            }
        }
        loss_history.push(if pairs == 0 { 0.0 } else { loss_sum / pairs as f64 });
    }

    Ok(SkipgramTable {
        dim: d,
        min_n: config.min_n,
        max_n: config.max_n,
        num_buckets: config.buckets,
        pieces,
        index,
        input,
        output,
        buckets,
        loss_history,
    })
}

impl SkipgramTable {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn pieces(&self) -> &[String] {
        &self.pieces
    }

    pub fn contains(&self, piece: &str) -> bool {
        self.index.contains_key(piece)
    }

    /// Average loss per context pair, one entry per epoch.
    pub fn loss_history(&self) -> &[f64] {
        &self.loss_history
    }

    pub fn num_buckets(&self) -> usize {
        self.num_buckets
    }

    pub fn ngram_range(&self) -> (usize, usize) {
        (self.min_n, self.max_n)
    }

    /// The trained piece vector alone, if the piece is known.
    pub fn piece_vector(&self, piece: &str) -> Option<&[f32]> {
        self.index.get(piece).map(|&i| &self.input[i * self.dim..(i + 1) * self.dim])
    }

    pub fn bucket_vector(&self, bucket: usize) -> &[f32] {
        &self.buckets[bucket * self.dim..(bucket + 1) * self.dim]
    }

    /// Piece vector (when known) plus the sum of its n-gram bucket vectors.
    /// Defined for any string.
    pub fn word_vector(&self, piece: &str) -> Vec<f32> {
        let mut v = match self.piece_vector(piece) {
            Some(p) => p.to_vec(),
            None => vec![0.0; self.dim],
        };
        for g in ngram_buckets(piece, self.min_n, self.max_n, self.num_buckets) {
            for (a, b) in v.iter_mut().zip(self.bucket_vector(g)) {
                *a += b;
            }
        }
        v
    }

    fn payload(&self) -> Vec<u8> {
        let mut e = Encoder::new();
        for v in [self.dim, self.min_n, self.max_n, self.num_buckets, self.pieces.len()] {
            e.u64(v as u64);
        }
        for p in &self.pieces {
            e.str(p);
        }
        e.f32s(&self.input);
        e.f32s(&self.output);
        e.f32s(&self.buckets);
        e.u64(self.loss_history.len() as u64);
        for l in &self.loss_history {
            e.u64(l.to_bits());
        }
        e.finish()
    }

    /// SHA-256 of the serialized table.
    pub fn content_hash(&self) -> String {
        sha256_hex(&self.payload())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_framed(path, MAGIC, SKIPGRAM_FORMAT_VERSION, &self.payload())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let payload = read_framed(path, MAGIC, SKIPGRAM_FORMAT_VERSION, "skipgram table")?;
        let mut d = Decoder::new(&payload);
        let dim = d.usize()?;
        let min_n = d.usize()?;
        let max_n = d.usize()?;
        let num_buckets = d.usize()?;
        let n = d.usize()?;
        let pieces = (0..n).map(|_| d.str()).collect::<Result<Vec<_>>>()?;
        let input = d.f32s()?;
        let output = d.f32s()?;
        let buckets = d.f32s()?;
        let h = d.usize()?;
        let loss_history = (0..h).map(|_| d.u64().map(f64::from_bits)).collect::<Result<Vec<_>>>()?;
        d.finish()?;
        if input.len() != n * dim || output.len() != n * dim || buckets.len() != num_buckets * dim {
            return Err(Error::Parse("skipgram table dimensions disagree with header".into()));
        }
        if num_buckets == 0 || min_n == 0 || min_n > max_n {
            return Err(Error::Parse("skipgram table header is invalid".into()));
        }
        let index = pieces.iter().enumerate().map(|(i, p)| (p.clone(), i)).collect();
        Ok(SkipgramTable {
            dim,
            min_n,
            max_n,
            num_buckets,
            pieces,
            index,
            input,
            output,
            buckets,
            loss_history,
        })
    }
}
