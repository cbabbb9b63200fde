use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binio::{read_framed, sha256_hex, write_framed, Decoder, Encoder};
use crate::error::{Error, Result};
use crate::model::gru::{gru_states, GruParams};
use crate::numeric::{AdamConfig, AdamState, ParamId, ParamStore, Tape, Tensor, Var};
use crate::subword::{TokenSequence, PAD_ID};

const MAGIC: &[u8; 4] = b"CMSC";
pub const CONTEXTUAL_FORMAT_VERSION: u32 = 1;
const INIT_BOUND: f32 = 0.08;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContextualConfig {
    pub emb_dim: usize,
    /// Hidden size per direction; sentence vectors have twice this length.
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub max_len: usize,
    pub held_out: f64,
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for ContextualConfig {
    fn default() -> Self {
        ContextualConfig {
            emb_dim: 256,
            hidden: 512,
            epochs: 5,
            lr: 1e-3,
            batch_size: 32,
            max_len: 64,
            held_out: 0.1,
            clip_norm: Some(5.0),
            seed: 0,
        }
    }
}

impl ContextualConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(Error::validation(format!("contextual.{field}: {msg}")));
        if self.emb_dim == 0 {
            return bad("emb_dim", "must be at least 1");
        }
        if self.hidden == 0 {
            return bad("hidden", "must be at least 1");
        }
        if self.epochs == 0 {
            return bad("epochs", "must be at least 1");
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad("lr", "must be a non-negative number");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1");
        }
        if self.max_len == 0 {
            return bad("max_len", "must be at least 1");
        }
        if !(0.0..1.0).contains(&self.held_out) {
            return bad("held_out", "must be in [0, 1)");
        }
        if let Some(c) = self.clip_norm {
            if !(c.is_finite() && c > 0.0) {
                return bad("clip_norm", "must be positive");
            }
        }
        Ok(())
    }
}

/// Forward and backward recurrent language models over subword ids sharing
/// one embedding table and one output projection.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextualEncoder {
    vocab_size: usize,
    max_len: usize,
    store: ParamStore,
    emb: ParamId,
    fwd: GruParams,
    bwd: GruParams,
    out_w: ParamId,
    out_b: ParamId,
    perplexity_history: Vec<f64>,
}

/// A batch laid out as `[B, T]` with pads after the real tokens.
struct Batch {
    b: usize,
    t: usize,
    ids: Vec<usize>,
    rev: Vec<usize>,
    mask: Vec<bool>,
    lens: Vec<usize>,
}

impl Batch {
    fn new(seqs: &[&[u32]]) -> Self {
        let b = seqs.len();
        let t = seqs.iter().map(|s| s.len()).max().unwrap_or(1).max(1);
        let mut ids = vec![PAD_ID as usize; b * t];
        let mut rev = ids.clone();
        let mut mask = vec![false; b * t];
        for (row, s) in seqs.iter().enumerate() {
            for (i, &id) in s.iter().enumerate() {
                ids[row * t + i] = id as usize;
                rev[row * t + i] = s[s.len() - 1 - i] as usize;
                mask[row * t + i] = true;
            }
        }
        Batch {
            b,
            t,
            ids,
            rev,
            mask,
            lens: seqs.iter().map(|s| s.len()).collect(),
        }
    }
}

impl ContextualEncoder {
    /// Freshly initialized parameters, uniform in ±0.08.
    pub fn new(vocab_size: usize, config: &ContextualConfig) -> Result<Self> {
        config.validate()?;
        if vocab_size == 0 {
            return Err(Error::validation("contextual encoder needs a non-empty vocabulary"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let (e, h) = (config.emb_dim, config.hidden);
        let emb = store.insert("ctx.emb", Tensor::uniform(&[vocab_size, e], -INIT_BOUND, INIT_BOUND, &mut rng))?;
        let fwd = GruParams::init(&mut store, "ctx.fwd", e, h, INIT_BOUND, &mut rng)?;
        let bwd = GruParams::init(&mut store, "ctx.bwd", e, h, INIT_BOUND, &mut rng)?;
        let out_w = store.insert("ctx.out.w", Tensor::uniform(&[h, vocab_size], -INIT_BOUND, INIT_BOUND, &mut rng))?;
        let out_b = store.insert("ctx.out.b", Tensor::zeros(&[vocab_size]))?;
        Ok(ContextualEncoder {
            vocab_size,
            max_len: config.max_len,
            store,
            emb,
            fwd,
            bwd,
            out_w,
            out_b,
            perplexity_history: Vec::new(),
        })
    }

    /// Sentence-vector length: both directions' hidden sizes.
    pub fn dim(&self) -> usize {
        2 * self.fwd.hidden(&self.store)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Held-out perplexity after each training epoch.
    pub fn perplexity_history(&self) -> &[f64] {
        &self.perplexity_history
    }

    fn clip<'a>(&self, seq: &'a TokenSequence) -> &'a [u32] {
        let real = seq.real_ids();
        &real[..real.len().min(self.max_len)]
    }

    fn check_ids(&self, seq: &[u32]) -> Result<()> {
        match seq.iter().find(|&&id| id as usize >= self.vocab_size) {
            Some(id) => Err(Error::validation(format!(
                "token id {id} out of range for contextual vocabulary of {}",
                self.vocab_size
            ))),
            None => Ok(()),
        }
    }

    /// Per-position states of both directions. Backward states are in
    /// reversed order.
    fn run(&self, tape: &mut Tape, batch: &Batch) -> Result<(Vec<Var>, Vec<Var>)> {
        let table = tape.param(self.emb);
        let xf = tape.embedding(table, &batch.ids, &[batch.b, batch.t])?;
        let xb = tape.embedding(table, &batch.rev, &[batch.b, batch.t])?;
        let fs = gru_states(tape, &self.fwd, xf, &batch.mask, None)?;
        let bs = gru_states(tape, &self.bwd, xb, &batch.mask, None)?;
        Ok((fs, bs))
    }

    /// Next-piece loss for one direction: the state at step `t` predicts the
    /// token at `t + 1`. Returns the mean loss and the number of targets.
    fn direction_loss(&self, tape: &mut Tape, states: &[Var], batch: &Batch, ids: &[usize]) -> Result<Option<(Var, usize)>> {
        let (b, t) = (batch.b, batch.t);
        if t < 2 {
            return Ok(None);
        }
        let mut targets = vec![0usize; b * (t - 1)];
        let mut weights = vec![0.0f32; b * (t - 1)];
        let mut count = 0;
        for row in 0..b {
            for step in 0..t - 1 {
                if step + 1 < batch.lens[row] {
                    targets[row * (t - 1) + step] = ids[row * t + step + 1];
                    weights[row * (t - 1) + step] = 1.0;
                    count += 1;
                }
            }
        }
        if count == 0 {
            return Ok(None);
        }
        let h = self.fwd.hidden(&self.store);
        let cat = tape.concat(&states[..t - 1])?;
        let flat = tape.reshape(cat, &[b * (t - 1), h])?;
        let (w, bias) = (tape.param(self.out_w), tape.param(self.out_b));
        let logits = tape.linear(flat, w, Some(bias))?;
        let loss = tape.weighted_cross_entropy(logits, &targets, &weights)?;
        Ok(Some((loss, count)))
    }

    /// Mean next-piece loss over both directions, with the target count.
    fn lm_loss(&self, tape: &mut Tape, batch: &Batch) -> Result<Option<(Var, usize)>> {
        let (fs, bs) = self.run(tape, batch)?;
        let f = self.direction_loss(tape, &fs, batch, &batch.ids)?;
        let b = self.direction_loss(tape, &bs, batch, &batch.rev)?;
        Ok(match (f, b) {
            (Some((lf, nf)), Some((lb, nb))) => {
                let total = (nf + nb) as f32;
                let sf = tape.scale(lf, nf as f32 / total);
                let sb = tape.scale(lb, nb as f32 / total);
                Some((tape.add(sf, sb)?, nf + nb))
            }
            (one, None) | (None, one) => one,
        })
    }

    /// `exp` of the mean next-piece negative log-likelihood over both
    /// directions. `None` when no sequence has two or more tokens.
    pub fn perplexity(&self, seqs: &[TokenSequence], batch_size: usize) -> Result<Option<f64>> {
        let clipped: Vec<&[u32]> = seqs.iter().map(|s| self.clip(s)).filter(|s| !s.is_empty()).collect();
        let mut nll = 0.0f64;
        let mut n = 0usize;
        for chunk in clipped.chunks(batch_size.max(1)) {
            for s in chunk {
                self.check_ids(s)?;
            }
            let batch = Batch::new(chunk);
            let mut tape = Tape::inference(&self.store);
            if let Some((loss, count)) = self.lm_loss(&mut tape, &batch)? {
                nll += tape.value(loss)[0] as f64 * count as f64;
                n += count;
            }
        }
        Ok((n > 0).then(|| (nll / n as f64).exp()))
    }

    /// Mean over real positions of `[forward state ; backward state]`.
    pub fn sentence_vector(&self, seq: &TokenSequence) -> Result<Vec<f32>> {
        Ok(self.sentence_vectors(std::slice::from_ref(seq), 1)?.remove(0))
    }

    pub fn sentence_vectors(&self, seqs: &[TokenSequence], batch_size: usize) -> Result<Vec<Vec<f32>>> {
        let h = self.fwd.hidden(&self.store);
        let mut out = Vec::with_capacity(seqs.len());
        let clipped: Vec<&[u32]> = seqs.iter().map(|s| self.clip(s)).collect();
        for (i, s) in clipped.iter().enumerate() {
            if s.is_empty() {
                return Err(Error::validation(format!("sequence {i} has no tokens")));
            }
            self.check_ids(s)?;
        }
        for chunk in clipped.chunks(batch_size.max(1)) {
            let batch = Batch::new(chunk);
            let mut tape = Tape::inference(&self.store);
            let (fs, bs) = self.run(&mut tape, &batch)?;
            for row in 0..batch.b {
                let len = batch.lens[row];
                let mut acc = vec![0.0f64; 2 * h];
                for step in 0..len {
                    let f = &tape.value(fs[step])[row * h..(row + 1) * h];
                    let b = &tape.value(bs[step])[row * h..(row + 1) * h];
                    for k in 0..h {
                        acc[k] += f[k] as f64;
                        acc[h + k] += b[k] as f64;
                    }
                }
                out.push(acc.iter().map(|v| (v / len as f64) as f32).collect());
            }
        }
        Ok(out)
    }

    fn payload(&self) -> Vec<u8> {
        let mut e = Encoder::new();
        e.u64(self.vocab_size as u64);
        e.u64(self.max_len as u64);
        e.u64(self.perplexity_history.len() as u64);
        for p in &self.perplexity_history {
            e.u64(p.to_bits());
        }
        e.store(&self.store);
        e.finish()
    }

    /// SHA-256 of the serialized encoder.
    pub fn content_hash(&self) -> String {
        sha256_hex(&self.payload())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_framed(path, MAGIC, CONTEXTUAL_FORMAT_VERSION, &self.payload())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let payload = read_framed(path, MAGIC, CONTEXTUAL_FORMAT_VERSION, "contextual encoder")?;
        let mut d = Decoder::new(&payload);
        let vocab_size = d.usize()?;
        let max_len = d.usize()?;
        let n = d.usize()?;
        let perplexity_history = (0..n).map(|_| d.u64().map(f64::from_bits)).collect::<Result<Vec<_>>>()?;
        let store = d.store()?;
        d.finish()?;
        let find = |name: &str| store.id(name).ok_or_else(|| Error::Parse(format!("missing parameter {name}")));
        let enc = ContextualEncoder {
            vocab_size,
            max_len,
            emb: find("ctx.emb")?,
            fwd: GruParams::find(&store, "ctx.fwd")?,
            bwd: GruParams::find(&store, "ctx.bwd")?,
            out_w: find("ctx.out.w")?,
            out_b: find("ctx.out.b")?,
            perplexity_history,
            store,
        };
        if enc.store.get(enc.emb).shape()[0] != vocab_size || max_len == 0 {
            return Err(Error::Parse("contextual encoder header disagrees with its parameters".into()));
        }
        Ok(enc)
    }
}

/// Trains both language models with Adam on all but a held-out slice, which
/// is used to track perplexity after every epoch.
pub fn train_contextual(corpus: &[TokenSequence], vocab_size: usize, config: &ContextualConfig) -> Result<ContextualEncoder> {
    let mut enc = ContextualEncoder::new(vocab_size, config)?;
    let usable: Vec<usize> = (0..corpus.len()).filter(|&i| !corpus[i].is_empty()).collect();
    if usable.is_empty() {
        return Err(Error::validation("contextual corpus is empty"));
    }
    for &i in &usable {
        enc.check_ids(enc.clip(&corpus[i]))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed);
    let mut order = usable.clone();
    order.shuffle(&mut rng);
    let n_held = ((order.len() as f64) * config.held_out).ceil() as usize;
    let (train_idx, held_idx) = if order.len() >= 2 && n_held > 0 {
        let n_held = n_held.min(order.len() - 1);
        let (a, b) = order.split_at(order.len() - n_held);
        (a.to_vec(), b.to_vec())
    } else {
        (order.clone(), order.clone())
    };
    let held: Vec<TokenSequence> = held_idx.iter().map(|&i| corpus[i].clone()).collect();

    let mut adam = AdamState::new(AdamConfig::with_lr(config.lr));
    let mut train_idx = train_idx;
    for epoch in 0..config.epochs {
        train_idx.shuffle(&mut rng);
        for chunk in train_idx.chunks(config.batch_size) {
            let seqs: Vec<&[u32]> = chunk.iter().map(|&i| enc.clip(&corpus[i])).collect();
            let batch = Batch::new(&seqs);
            let grads = {
                let mut tape = Tape::with_params(&enc.store);
                let Some((loss, _)) = enc.lm_loss(&mut tape, &batch)? else { continue };
                let value = tape.value(loss)[0];
                if !value.is_finite() {
                    return Err(Error::NonFinite(format!("contextual LM loss at epoch {}", epoch + 1)));
                }
                tape.backward(loss)?
            };
            grads.accumulate_into(&mut enc.store)?;
            if let Some(c) = config.clip_norm {
                let norm = enc.store.grad_norm();
                if norm > c {
                    enc.store.scale_grads((c / norm) as f32);
                }
            }
            adam.step(&mut enc.store)?;
        }
        let ppl = enc.perplexity(&held, config.batch_size)?.unwrap_or(1.0);
        enc.perplexity_history.push(ppl);
    }
    Ok(enc)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ContextualConfig {
        ContextualConfig {
            emb_dim: 4,
            hidden: 3,
            epochs: 2,
            batch_size: 2,
            ..Default::default()
        }
    }

    #[test]
    fn vector_length_is_twice_hidden() {
        let enc = ContextualEncoder::new(10, &tiny()).unwrap();
        let v = enc.sentence_vector(&TokenSequence::new(vec![4, 5, 6])).unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!(ContextualEncoder::new(10, &ContextualConfig::default()).unwrap().dim(), 1024);
    }

    #[test]
    fn padding_does_not_change_vector() {
        let enc = ContextualEncoder::new(10, &tiny()).unwrap();
        let seq = TokenSequence::new(vec![4, 5, 6]);
        let a = enc.sentence_vector(&seq).unwrap();
        let b = enc.sentence_vector(&seq.padded(7)).unwrap();
        assert_eq!(a, b);
        // batched with a longer row
        let both = enc
            .sentence_vectors(&[seq.clone(), TokenSequence::new(vec![4, 4, 4, 4, 4, 9])], 2)
            .unwrap();
        assert_eq!(both[0], a);
    }

    #[test]
    fn empty_inputs_rejected() {
        let enc = ContextualEncoder::new(10, &tiny()).unwrap();
        assert!(enc.sentence_vector(&TokenSequence::default()).is_err());
        assert!(train_contextual(&[TokenSequence::default()], 10, &tiny()).is_err());
        assert!(enc.sentence_vector(&TokenSequence::new(vec![42])).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let corpus: Vec<TokenSequence> = (0..6).map(|i| TokenSequence::new(vec![4 + i % 3, 5, 6, 7])).collect();
        let enc = train_contextual(&corpus, 10, &tiny()).unwrap();
        assert_eq!(enc.perplexity_history().len(), 2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ctx.bin");
        enc.save(&path).unwrap();
        assert_eq!(ContextualEncoder::load(&path).unwrap(), enc);
    }
}
