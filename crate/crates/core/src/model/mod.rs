//! Classification network: embedded subword sequence, transformer encoder,
//! GRU readout, fusion with sentence-level features, and a linear output.

mod forward;
pub mod gru;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::NUM_LABELS;
use crate::embed::SkipgramTable;
use crate::error::{Error, Result};
use crate::numeric::{ParamId, ParamStore, Tensor};
use crate::subword::{SubwordVocab, TokenSequence, NUM_SPECIAL, PAD_ID};

pub use forward::{
    encode_sequence, fuse_and_classify, gru_forward, model_forward, multi_head_attention, position_wise_ffn,
    scaled_dot_attention,
};
use gru::GruParams;

pub const INIT_BOUND: f32 = 0.08;
pub const LAYER_NORM_EPS: f32 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PositionalMode {
    #[default]
    Add,
    /// Concatenate then project back to `hid_dim`.
    Concat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Total subword vocabulary size, special tokens included.
    pub vocab_size: usize,
    pub hid_dim: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub pf_dim: usize,
    pub dropout: f32,
    pub max_len: usize,
    pub n_classes: usize,
    /// Width of the TF-IDF input; 0 disables the channel.
    pub tfidf_dim: usize,
    /// Width of the contextual input; 0 disables the channel.
    pub ctx_dim: usize,
    pub gru_hidden: usize,
    pub positional_mode: PositionalMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 8000 + NUM_SPECIAL,
            hid_dim: 300,
            n_heads: 6,
            n_layers: 1,
            pf_dim: 2048,
            dropout: 0.1,
            max_len: 128,
            n_classes: NUM_LABELS,
            tfidf_dim: 5000,
            ctx_dim: 1024,
            gru_hidden: 300,
            positional_mode: PositionalMode::Add,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::validation(format!("model.{field}: {msg}")));
        for (field, v) in [
            ("vocab_size", self.vocab_size),
            ("hid_dim", self.hid_dim),
            ("n_heads", self.n_heads),
            ("pf_dim", self.pf_dim),
            ("max_len", self.max_len),
            ("gru_hidden", self.gru_hidden),
        ] {
            if v == 0 {
                return bad(field, "must be positive".into());
            }
        }
        if self.vocab_size <= NUM_SPECIAL {
            return bad("vocab_size", format!("must exceed the {NUM_SPECIAL} special tokens"));
        }
        if !self.hid_dim.is_multiple_of(self.n_heads) {
            return bad(
                "n_heads",
                format!("hid_dim {} is not divisible by n_heads {}", self.hid_dim, self.n_heads),
            );
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout", format!("{} is outside [0, 1)", self.dropout));
        }
        if self.n_classes < 2 {
            return bad("n_classes", "must be at least 2".into());
        }
        Ok(())
    }

    pub fn fusion_dim(&self) -> usize {
        self.gru_hidden + self.ctx_dim + self.tfidf_dim
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct EncoderLayer {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub ff1: Linear,
    pub ff2: Linear,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
}

/// All trainable tensors of the classifier plus the config they were
/// shaped from.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    store: ParamStore,
    pub(crate) tok_emb: ParamId,
    pub(crate) pos_emb: ParamId,
    pub(crate) pos_proj: Option<Linear>,
    pub(crate) layers: Vec<EncoderLayer>,
    pub(crate) gru: GruParams,
    pub(crate) out: Linear,
}

/// Expected `(name, shape, init)` of every tensor, in insertion order.
#[derive(Clone, Copy)]
enum Init {
    Uniform,
    Ones,
    Zeros,
}

fn layout(c: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let h = c.hid_dim;
    let mut v = vec![
        ("tok_emb".to_string(), vec![c.vocab_size, h], Init::Uniform),
        ("pos_emb".to_string(), vec![c.max_len, h], Init::Uniform),
    ];
    if c.positional_mode == PositionalMode::Concat {
        v.push(("pos_proj.w".into(), vec![2 * h, h], Init::Uniform));
        v.push(("pos_proj.b".into(), vec![h], Init::Uniform));
    }
    for i in 0..c.n_layers {
        let p = format!("enc{i}");
        for n in ["q", "k", "v", "o"] {
            v.push((format!("{p}.attn.{n}.w"), vec![h, h], Init::Uniform));
            v.push((format!("{p}.attn.{n}.b"), vec![h], Init::Uniform));
        }
        v.push((format!("{p}.ln1.g"), vec![h], Init::Ones));
        v.push((format!("{p}.ln1.b"), vec![h], Init::Zeros));
        v.push((format!("{p}.ffn.1.w"), vec![h, c.pf_dim], Init::Uniform));
        v.push((format!("{p}.ffn.1.b"), vec![c.pf_dim], Init::Uniform));
        v.push((format!("{p}.ffn.2.w"), vec![c.pf_dim, h], Init::Uniform));
        v.push((format!("{p}.ffn.2.b"), vec![h], Init::Uniform));
        v.push((format!("{p}.ln2.g"), vec![h], Init::Ones));
        v.push((format!("{p}.ln2.b"), vec![h], Init::Zeros));
    }
    let g = c.gru_hidden;
    for (n, shape) in [
        ("w_z", vec![h, g]),
        ("w_r", vec![h, g]),
        ("w_h", vec![h, g]),
        ("u_z", vec![g, g]),
        ("u_r", vec![g, g]),
        ("u_h", vec![g, g]),
        ("b_z", vec![g]),
        ("b_r", vec![g]),
        ("b_h", vec![g]),
    ] {
        v.push((format!("gru.{n}"), shape, Init::Uniform));
    }
    v.push(("out.w".into(), vec![c.fusion_dim(), c.n_classes], Init::Uniform));
    v.push(("out.b".into(), vec![c.n_classes], Init::Uniform));
    v
}

impl ModelParams {
    /// Uniform(−0.08, 0.08) everywhere except layer-norm gains (1) and
    /// biases (0).
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for (name, shape, init) in layout(config) {
            let t = match init {
                Init::Uniform => Tensor::uniform(&shape, -INIT_BOUND, INIT_BOUND, &mut rng),
                Init::Ones => Tensor::full(&shape, 1.0),
                Init::Zeros => Tensor::zeros(&shape),
            };
            store.insert(name, t)?;
        }
        Self::from_store(config.clone(), store)
    }

    /// Wraps a loaded store, checking every name and shape against the
    /// config.
    pub fn from_store(config: ModelConfig, store: ParamStore) -> Result<Self> {
        config.validate()?;
        let expected = layout(&config);
        if expected.len() != store.len() {
            return Err(Error::validation(format!(
                "parameter count {} does not match the config ({})",
                store.len(),
                expected.len()
            )));
        }
        for (name, shape, _) in &expected {
            let id = store
                .id(name)
                .ok_or_else(|| Error::validation(format!("missing parameter {name}")))?;
            if store.get(id).shape() != shape.as_slice() {
                return Err(Error::Shape {
                    op: "load parameter",
                    left: store.get(id).shape().to_vec(),
                    right: shape.clone(),
                });
            }
        }
        let id = |n: &str| store.id(n).expect("checked above");
        let lin = |p: &str| Linear {
            w: id(&format!("{p}.w")),
            b: id(&format!("{p}.b")),
        };
        let layers = (0..config.n_layers)
            .map(|i| {
                let p = format!("enc{i}");
                EncoderLayer {
                    q: lin(&format!("{p}.attn.q")),
                    k: lin(&format!("{p}.attn.k")),
                    v: lin(&format!("{p}.attn.v")),
                    o: lin(&format!("{p}.attn.o")),
                    ln1_g: id(&format!("{p}.ln1.g")),
                    ln1_b: id(&format!("{p}.ln1.b")),
                    ff1: lin(&format!("{p}.ffn.1")),
                    ff2: lin(&format!("{p}.ffn.2")),
                    ln2_g: id(&format!("{p}.ln2.g")),
                    ln2_b: id(&format!("{p}.ln2.b")),
                }
            })
            .collect();
        Ok(ModelParams {
            tok_emb: id("tok_emb"),
            pos_emb: id("pos_emb"),
            pos_proj: (config.positional_mode == PositionalMode::Concat).then(|| lin("pos_proj")),
            layers,
            gru: GruParams::find(&store, "gru")?,
            out: lin("out"),
            config,
            store,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn into_store(self) -> ParamStore {
        self.store
    }

    /// Copies skip-gram vectors into the token embedding rows of pieces the
    /// table knows. Returns the number of rows replaced.
    pub fn init_token_embeddings(&mut self, vocab: &SubwordVocab, table: &SkipgramTable) -> Result<usize> {
        let h = self.config.hid_dim;
        if table.dim() != h {
            return Err(Error::validation(format!(
                "skipgram dim {} differs from model hid_dim {h}",
                table.dim()
            )));
        }
        if vocab.len() != self.config.vocab_size {
            return Err(Error::validation(format!(
                "vocabulary has {} pieces but the model expects {}",
                vocab.len(),
                self.config.vocab_size
            )));
        }
        let emb = self.store.get_mut(self.tok_emb).data_mut();
        let mut n = 0;
        for (id, piece) in vocab.pieces().iter().enumerate().skip(NUM_SPECIAL) {
            if table.contains(piece) {
                emb[id * h..(id + 1) * h].copy_from_slice(&table.word_vector(piece));
                n += 1;
            }
        }
        Ok(n)
    }
}

/// Right-padded id matrix with per-example sentence features.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedBatch {
    pub batch: usize,
    pub len: usize,
    /// `[B, T]`, pad id where the mask is false.
    pub ids: Vec<usize>,
    /// `[B, T]`, true for real tokens.
    pub mask: Vec<bool>,
    /// `[B, tfidf_dim]`.
    pub tfidf: Vec<f32>,
    /// `[B, ctx_dim]`.
    pub ctx: Vec<f32>,
    pub labels: Option<Vec<usize>>,
}

impl PaddedBatch {
    /// Pads every sequence to the longest one, or to `pad_to` when given.
    pub fn new(
        seqs: &[&TokenSequence],
        tfidf: &[&[f32]],
        ctx: &[&[f32]],
        labels: Option<Vec<usize>>,
        pad_to: Option<usize>,
    ) -> Result<Self> {
        let b = seqs.len();
        if b == 0 {
            return Err(Error::validation("batch is empty"));
        }
        if tfidf.len() != b || ctx.len() != b || labels.as_ref().is_some_and(|l| l.len() != b) {
            return Err(Error::validation("batch feature rows disagree with sequence count"));
        }
        let longest = seqs.iter().map(|s| s.length).max().unwrap_or(0);
        let t = pad_to.unwrap_or(longest);
        if t < longest {
            return Err(Error::validation(format!("pad_to {t} is shorter than a sequence of {longest}")));
        }
        let mut ids = vec![PAD_ID as usize; b * t];
        let mut mask = vec![false; b * t];
        for (row, s) in seqs.iter().enumerate() {
            if s.length == 0 {
                return Err(Error::validation(format!("batch row {row} has no real tokens")));
            }
            for (i, &id) in s.real_ids().iter().enumerate() {
                ids[row * t + i] = id as usize;
                mask[row * t + i] = true;
            }
        }
        let flat = |rows: &[&[f32]], what: &str| -> Result<Vec<f32>> {
            let w = rows[0].len();
            if rows.iter().any(|r| r.len() != w) {
                return Err(Error::validation(format!("{what} vectors have differing lengths")));
            }
            Ok(rows.iter().flat_map(|r| r.iter().copied()).collect())
        };
        Ok(PaddedBatch {
            batch: b,
            len: t,
            ids,
            mask,
            tfidf: flat(tfidf, "tf-idf")?,
            ctx: flat(ctx, "contextual")?,
            labels,
        })
    }

    pub fn tfidf_dim(&self) -> usize {
        self.tfidf.len() / self.batch
    }

    pub fn ctx_dim(&self) -> usize {
        self.ctx.len() / self.batch
    }
}
