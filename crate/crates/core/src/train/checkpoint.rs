//! Trained classifier on disk: framed binary with magic `CMS1`. The payload
//! is a JSON metadata block followed by the parameter tensors.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binio::{read_framed, write_framed, Decoder, Encoder};
use crate::corpus::LabelSchema;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};

use super::{Components, EpochRecord, TrainConfig};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"CMS1";

/// SHA-256 of each component the model was trained against. Disabled
/// channels have no hash.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentHashes {
    pub vocab: String,
    pub skipgram: Option<String>,
    pub tfidf: Option<String>,
    pub contextual: Option<String>,
}

impl ComponentHashes {
    pub fn of(components: &Components) -> Result<Self> {
        Ok(ComponentHashes {
            vocab: components.vocab.content_hash()?,
            skipgram: components.skipgram.map(|s| s.content_hash()),
            tfidf: components.tfidf.map(|t| t.content_hash()).transpose()?,
            contextual: components.contextual.map(|c| c.content_hash()),
        })
    }
}

/// Position of the training RNG when the run ended.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: hex::encode(rng.get_seed()),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::Parse("malformed rng state in checkpoint".into());
        let seed: [u8; 32] = hex::decode(&self.seed)
            .map_err(|_| bad())?
            .try_into()
            .map_err(|_| bad())?;
        let pos: u128 = self.word_pos.parse().map_err(|_| bad())?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub hashes: ComponentHashes,
    pub schema: LabelSchema,
    pub train_config: TrainConfig,
    pub history: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub rng: RngState,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    model: ModelConfig,
    hashes: ComponentHashes,
    schema: LabelSchema,
    train: TrainConfig,
    history: Vec<EpochRecord>,
    best_epoch: usize,
    rng: RngState,
}

impl Checkpoint {
    pub fn config(&self) -> &ModelConfig {
        self.params.config()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = Meta {
            model: self.params.config().clone(),
            hashes: self.hashes.clone(),
            schema: self.schema.clone(),
            train: self.train_config.clone(),
            history: self.history.clone(),
            best_epoch: self.best_epoch,
            rng: self.rng.clone(),
        };
        let mut e = Encoder::new();
        e.str(&serde_json::to_string(&meta)?);
        e.store(self.params.store());
        write_framed(path, MAGIC, CHECKPOINT_VERSION, &e.finish())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let payload = read_framed(path, MAGIC, CHECKPOINT_VERSION, "checkpoint")?;
        let mut d = Decoder::new(&payload);
        let meta: Meta = serde_json::from_str(&d.str()?)?;
        let store = d.store()?;
        d.finish()?;
        meta.schema.validate()?;
        Ok(Checkpoint {
            params: ModelParams::from_store(meta.model, store)?,
            hashes: meta.hashes,
            schema: meta.schema,
            train_config: meta.train,
            history: meta.history,
            best_epoch: meta.best_epoch,
            rng: meta.rng,
        })
    }

    /// Fails unless `components` are exactly the ones the model was trained
    /// with.
    pub fn verify(&self, components: &Components) -> Result<()> {
        let found = ComponentHashes::of(components)?;
        let pairs = [
            ("vocabulary", Some(&self.hashes.vocab), Some(&found.vocab)),
            ("skipgram table", self.hashes.skipgram.as_ref(), found.skipgram.as_ref()),
            ("tf-idf model", self.hashes.tfidf.as_ref(), found.tfidf.as_ref()),
            ("contextual encoder", self.hashes.contextual.as_ref(), found.contextual.as_ref()),
        ];
        let show = |h: Option<&String>| h.cloned().unwrap_or_else(|| "none".into());
        for (component, expected, got) in pairs {
            // the skipgram table only seeds the embeddings, so inference may
            // run without it
            if component == "skipgram table" && got.is_none() {
                continue;
            }
            if expected != got {
                return Err(Error::HashMismatch {
                    component: component.into(),
                    expected: show(expected),
                    found: show(got),
                });
            }
        }
        Ok(())
    }
}
