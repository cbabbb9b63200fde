//! Supervised training with dev-set model selection, evaluation and
//! checkpoints.

mod checkpoint;
mod metrics;

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{normalize_text, LabelSchema, LabeledExample};
use crate::embed::{tfidf_tokens, ContextualEncoder, SkipgramTable, TfIdfModel};
use crate::error::{Error, Result};
use crate::model::{model_forward, ModelConfig, ModelParams, PaddedBatch};
use crate::numeric::{argmax, softmax, AdamConfig, AdamState, Tape};
use crate::subword::{SubwordVocab, TokenSequence, VocabKind};

pub use checkpoint::{Checkpoint, ComponentHashes, RngState, CHECKPOINT_VERSION};
pub use metrics::{accuracy, confusion_matrix, weighted_f1, ClassMetrics, Confusion, MetricsReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a dev weighted-F1 improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub shuffle: bool,
    /// Weight the loss by inverse class frequency.
    pub class_weighting: bool,
    pub clip_norm: Option<f64>,
    /// Resample unigram segmentations each epoch at this smoothing
    /// exponent. Off by default.
    pub sampling_alpha: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-4,
            batch_size: 32,
            max_epochs: 30,
            patience: 5,
            seed: 0,
            shuffle: true,
            class_weighting: false,
            clip_norm: None,
            sampling_alpha: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        // lr = 0 is allowed: it runs the loop without moving the weights
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::validation(format!("train.lr must be finite and >= 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("train.batch_size must be at least 1"));
        }
        if self.max_epochs == 0 {
            return Err(Error::validation("train.max_epochs must be at least 1"));
        }
        if self.patience == 0 {
            return Err(Error::validation("train.patience must be at least 1"));
        }
        if let Some(c) = self.clip_norm {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::validation(format!("train.clip_norm must be positive, got {c}")));
            }
        }
        if let Some(a) = self.sampling_alpha {
            if !(a.is_finite() && a > 0.0) {
                return Err(Error::validation(format!("train.sampling_alpha must be positive, got {a}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_accuracy: f64,
    pub dev_weighted_f1: f64,
}

/// One JSON object per line.
pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in history {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Everything fitted before the classifier. Disabled channels are `None`.
#[derive(Debug, Clone, Copy)]
pub struct Components<'a> {
    pub vocab: &'a SubwordVocab,
    pub skipgram: Option<&'a SkipgramTable>,
    pub tfidf: Option<&'a TfIdfModel>,
    pub contextual: Option<&'a ContextualEncoder>,
}

/// Model inputs for one text.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    pub tokens: TokenSequence,
    pub tfidf: Vec<f32>,
    pub ctx: Vec<f32>,
}

const FEATURE_BATCH: usize = 64;

impl Components<'_> {
    /// Checks that the model's input widths agree with the components.
    pub fn check_config(&self, cfg: &ModelConfig) -> Result<()> {
        if cfg.vocab_size != self.vocab.len() {
            return Err(Error::validation(format!(
                "model.vocab_size is {} but the vocabulary has {} pieces",
                cfg.vocab_size,
                self.vocab.len()
            )));
        }
        let tfidf = self.tfidf.map_or(0, |t| t.dim());
        if cfg.tfidf_dim != tfidf {
            return Err(Error::validation(format!(
                "model.tfidf_dim is {} but the tf-idf channel provides {tfidf}",
                cfg.tfidf_dim
            )));
        }
        let ctx = self.contextual.map_or(0, |c| c.dim());
        if cfg.ctx_dim != ctx {
            return Err(Error::validation(format!(
                "model.ctx_dim is {} but the contextual channel provides {ctx}",
                cfg.ctx_dim
            )));
        }
        if let Some(c) = self.contextual {
            if c.vocab_size() != self.vocab.len() {
                return Err(Error::validation("contextual encoder was trained on a different vocabulary"));
            }
        }
        Ok(())
    }

    fn tokens(&self, text: &str, max_len: usize) -> TokenSequence {
        let mut ids = self.vocab.encode(text).ids;
        ids.truncate(max_len);
        TokenSequence::new(ids)
    }

    /// Normalizes, encodes and computes sentence features. Token sequences
    /// are cut to `max_len`.
    pub fn featurize<S: AsRef<str>>(&self, texts: &[S], max_len: usize) -> Result<Vec<Features>> {
        let norm: Vec<String> = texts.iter().map(|t| normalize_text(t.as_ref())).collect();
        let tokens: Vec<TokenSequence> = norm.iter().map(|t| self.tokens(t, max_len)).collect();
        if let Some(i) = tokens.iter().position(|t| t.is_empty()) {
            return Err(Error::validation(format!("text {i} is empty after normalization")));
        }
        let ctx = match self.contextual {
            Some(enc) => enc.sentence_vectors(&tokens, FEATURE_BATCH)?,
            None => vec![Vec::new(); tokens.len()],
        };
        Ok(tokens
            .into_iter()
            .zip(ctx)
            .zip(&norm)
            .map(|((tokens, ctx), text)| Features {
                tokens,
                tfidf: self.tfidf.map_or_else(Vec::new, |m| m.sentence_vector(&tfidf_tokens(text))),
                ctx,
            })
            .collect())
    }
}

fn make_batch(feats: &[&Features], labels: Option<Vec<usize>>) -> Result<PaddedBatch> {
    let seqs: Vec<&TokenSequence> = feats.iter().map(|f| &f.tokens).collect();
    let tfidf: Vec<&[f32]> = feats.iter().map(|f| f.tfidf.as_slice()).collect();
    let ctx: Vec<&[f32]> = feats.iter().map(|f| f.ctx.as_slice()).collect();
    PaddedBatch::new(&seqs, &tfidf, &ctx, labels, None)
}

/// Inference-mode logits, one row per input.
pub fn predict_logits(params: &ModelParams, feats: &[Features], batch_size: usize) -> Result<Vec<Vec<f32>>> {
    let batch_size = batch_size.max(1);
    let refs: Vec<&Features> = feats.iter().collect();
    let chunks: Vec<Vec<Vec<f32>>> = refs
        .par_chunks(batch_size)
        .map(|chunk| {
            let batch = make_batch(chunk, None)?;
            let mut tape = Tape::inference(params.store());
            // dropout is off, so this rng is never drawn from
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let out = model_forward(&mut tape, params, &batch, false, &mut rng)?;
            let c = params.config().n_classes;
            Ok(tape.value(out).chunks(c).map(|r| r.to_vec()).collect())
        })
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

/// Argmax class (lowest index on ties) and softmax probabilities.
pub fn predict(params: &ModelParams, feats: &[Features], batch_size: usize) -> Result<Vec<(usize, Vec<f64>)>> {
    Ok(predict_logits(params, feats, batch_size)?
        .iter()
        .map(|l| (argmax(l), softmax(l)))
        .collect())
}

pub fn evaluate(params: &ModelParams, feats: &[Features], labels: &[usize], schema: &LabelSchema) -> Result<MetricsReport> {
    if feats.is_empty() {
        return Err(Error::validation("evaluation set is empty"));
    }
    if feats.len() != labels.len() {
        return Err(Error::validation("evaluation features and labels differ in length"));
    }
    let pred: Vec<usize> = predict_logits(params, feats, FEATURE_BATCH)?
        .iter()
        .map(|l| argmax(l))
        .collect();
    MetricsReport::from_predictions(labels, &pred, &schema.labels)
}

fn class_weights(labels: &[usize], n_classes: usize) -> Vec<f32> {
    let mut counts = vec![0usize; n_classes];
    for &l in labels {
        counts[l] += 1;
    }
    let present = counts.iter().filter(|&&c| c > 0).count();
    counts
        .iter()
        .map(|&c| if c == 0 { 1.0 } else { (labels.len() as f64 / (present * c) as f64) as f32 })
        .collect()
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Dev metrics of the kept parameters.
    pub best: MetricsReport,
}

/// Trains from scratch and keeps the parameters with the best dev weighted
/// F1. The token embeddings start from the skipgram table when one is
/// given.
pub fn train(
    train_set: &[LabeledExample],
    dev_set: &[LabeledExample],
    components: &Components,
    schema: &LabelSchema,
    model_config: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model_config.validate()?;
    schema.validate()?;
    components.check_config(model_config)?;
    if model_config.n_classes != schema.labels.len() {
        return Err(Error::validation(format!(
            "model.n_classes is {} but the schema has {} labels",
            model_config.n_classes,
            schema.labels.len()
        )));
    }
    if train_set.is_empty() {
        return Err(Error::validation("training set is empty"));
    }
    if dev_set.is_empty() {
        return Err(Error::validation("dev set is empty"));
    }
    if cfg.sampling_alpha.is_some() && components.vocab.kind() != VocabKind::Unigram {
        return Err(Error::validation("train.sampling_alpha requires a unigram vocabulary"));
    }
    let max_len = model_config.max_len;
    let texts: Vec<&str> = train_set.iter().map(|e| e.text.as_str()).collect();
    let mut feats = components.featurize(&texts, max_len)?;
    let labels: Vec<usize> = train_set.iter().map(|e| e.label.index()).collect();
    let dev_texts: Vec<&str> = dev_set.iter().map(|e| e.text.as_str()).collect();
    let dev_feats = components.featurize(&dev_texts, max_len)?;
    let dev_labels: Vec<usize> = dev_set.iter().map(|e| e.label.index()).collect();
    let norm: Vec<String> = texts.iter().map(|t| normalize_text(t)).collect();

    let mut params = ModelParams::init(model_config, cfg.seed)?;
    if let Some(table) = components.skipgram {
        params.init_token_embeddings(components.vocab, table)?;
    }
    let weights = if cfg.class_weighting {
        class_weights(&labels, model_config.n_classes)
    } else {
        vec![1.0; model_config.n_classes]
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7a11);
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.lr));
    let mut order: Vec<usize> = (0..feats.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<(ModelParams, MetricsReport, usize)> = None;
    let mut stale = 0;
    for epoch in 1..=cfg.max_epochs {
        if let Some(alpha) = cfg.sampling_alpha {
            for (f, text) in feats.iter_mut().zip(&norm) {
                let mut ids = components.vocab.sample_encode(text, alpha, &mut rng)?.ids;
                ids.truncate(max_len);
                f.tokens = TokenSequence::new(ids);
            }
        }
        if cfg.shuffle {
            order.shuffle(&mut rng);
        }
        let mut loss_sum = 0.0f64;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let rows: Vec<&Features> = chunk.iter().map(|&i| &feats[i]).collect();
            let targets: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let row_w: Vec<f32> = targets.iter().map(|&t| weights[t]).collect();
            let batch = make_batch(&rows, Some(targets.clone()))?;
            let grads = {
                let mut tape = Tape::with_params(params.store());
                let logits = model_forward(&mut tape, &params, &batch, true, &mut rng)?;
                let loss = tape.weighted_cross_entropy(logits, &targets, &row_w)?;
                let value = tape.value(loss)[0];
                if !value.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "training loss is {value} at epoch {epoch}, batch {} (lr {})",
                        b + 1,
                        cfg.lr
                    )));
                }
                loss_sum += value as f64 * chunk.len() as f64;
                tape.backward(loss)?
            };
            let store = params.store_mut();
            grads.accumulate_into(store)?;
            if let Some(c) = cfg.clip_norm {
                let norm = store.grad_norm();
                if norm > c {
                    store.scale_grads((c / norm) as f32);
                }
            }
            adam.step(store)?;
        }
        let dev = evaluate(&params, &dev_feats, &dev_labels, schema)?;
        history.push(EpochRecord {
            epoch,
            train_loss: loss_sum / feats.len() as f64,
            dev_accuracy: dev.accuracy,
            dev_weighted_f1: dev.weighted_f1,
        });
        if best.as_ref().is_none_or(|(_, m, _)| dev.weighted_f1 > m.weighted_f1) {
            best = Some((params.clone(), dev, epoch));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    let (params, best, best_epoch) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            params,
            hashes: ComponentHashes::of(components)?,
            schema: schema.clone(),
            train_config: cfg.clone(),
            history,
            best_epoch,
            rng: RngState::capture(&rng),
        },
        best,
    })
}
