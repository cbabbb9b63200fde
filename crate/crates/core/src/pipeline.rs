//! End-to-end steps over an artifact directory: tokenizer, embeddings,
//! classifier, evaluation and prediction.

use std::fs::{self, OpenOptions};
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::corpus::{load_tsv, normalize_text, split, LabelSchema, LabeledExample, NUM_LABELS};
use crate::embed::{
    fit_tfidf, tfidf_tokens, train_contextual, train_skipgram, ContextualConfig, ContextualEncoder, SkipgramConfig,
    SkipgramTable, TfIdfModel, DEFAULT_TFIDF_TERMS,
};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, PositionalMode};
use crate::subword::{self, SubwordVocab, UnigramConfig, VocabKind, NUM_SPECIAL};
use crate::train::{self, evaluate, predict, write_history, Checkpoint, Components, MetricsReport, TrainConfig, TrainOutcome};

pub const VOCAB_FILE: &str = "vocab.json";
pub const SKIPGRAM_FILE: &str = "skipgram.bin";
pub const CONTEXTUAL_FILE: &str = "ctx.bin";
pub const TFIDF_FILE: &str = "tfidf.json";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const METRICS_FILE: &str = "metrics.json";
pub const HISTORY_FILE: &str = "history.jsonl";
const LOCK_FILE: &str = ".cmsenti.lock";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub train: Option<PathBuf>,
    /// When unset, dev is split off the training file.
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub artifacts: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            train: None,
            dev: None,
            test: None,
            artifacts: PathBuf::from("artifacts"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerSettings {
    pub kind: VocabKind,
    /// Learned pieces, special tokens not counted.
    pub vocab_size: usize,
    pub unigram: UnigramConfig,
}

impl Default for TokenizerSettings {
    fn default() -> Self {
        TokenizerSettings {
            kind: VocabKind::Unigram,
            vocab_size: 8000,
            unigram: UnigramConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TfIdfSettings {
    pub terms: usize,
}

impl Default for TfIdfSettings {
    fn default() -> Self {
        TfIdfSettings {
            terms: DEFAULT_TFIDF_TERMS,
        }
    }
}

/// Which optional channels feed the classifier. The skipgram-initialized
/// transformer is always on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Features {
    pub contextual: bool,
    pub tfidf: bool,
}

impl Default for Features {
    fn default() -> Self {
        Features {
            contextual: true,
            tfidf: true,
        }
    }
}

/// Classifier shape. Vocabulary size and channel widths come from the
/// fitted components; set `tfidf_dim` or `ctx_dim` only to assert them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSettings {
    pub hid_dim: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub pf_dim: usize,
    pub dropout: f32,
    pub max_len: usize,
    pub gru_hidden: usize,
    pub positional_mode: PositionalMode,
    pub tfidf_dim: Option<usize>,
    pub ctx_dim: Option<usize>,
}

impl Default for ModelSettings {
    fn default() -> Self {
        let d = ModelConfig::default();
        ModelSettings {
            hid_dim: d.hid_dim,
            n_heads: d.n_heads,
            n_layers: d.n_layers,
            pf_dim: d.pf_dim,
            dropout: d.dropout,
            max_len: d.max_len,
            gru_hidden: d.gru_hidden,
            positional_mode: d.positional_mode,
            tfidf_dim: None,
            ctx_dim: None,
        }
    }
}

impl ModelSettings {
    pub fn resolve(&self, vocab_size: usize, tfidf_dim: usize, ctx_dim: usize) -> Result<ModelConfig> {
        let check = |field: &str, want: Option<usize>, got: usize| match want {
            Some(w) if w != got => Err(Error::validation(format!(
                "model.{field} is {w} but the enabled components provide {got}"
            ))),
            _ => Ok(()),
        };
        check("tfidf_dim", self.tfidf_dim, tfidf_dim)?;
        check("ctx_dim", self.ctx_dim, ctx_dim)?;
        let cfg = ModelConfig {
            vocab_size,
            hid_dim: self.hid_dim,
            n_heads: self.n_heads,
            n_layers: self.n_layers,
            pf_dim: self.pf_dim,
            dropout: self.dropout,
            max_len: self.max_len,
            n_classes: NUM_LABELS,
            tfidf_dim,
            ctx_dim,
            gru_hidden: self.gru_hidden,
            positional_mode: self.positional_mode,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: Paths,
    /// Language tag used in the "not-<language>" label.
    pub language: String,
    pub dev_ratio: f64,
    pub tokenizer: TokenizerSettings,
    pub skipgram: SkipgramConfig,
    pub contextual: ContextualConfig,
    pub tfidf: TfIdfSettings,
    pub features: Features,
    pub model: ModelSettings,
    pub train: TrainConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            paths: Paths::default(),
            language: "tamil".into(),
            dev_ratio: 0.1,
            tokenizer: TokenizerSettings::default(),
            skipgram: SkipgramConfig::default(),
            contextual: ContextualConfig::default(),
            tfidf: TfIdfSettings::default(),
            features: Features::default(),
            model: ModelSettings::default(),
            train: TrainConfig::default(),
        }
    }
}

/// Sets `a.b.c` in a JSON tree. The value is parsed as JSON when possible
/// and taken as a plain string otherwise.
fn apply_override(root: &mut Value, item: &str) -> Result<()> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| Error::validation(format!("override `{item}` is not of the form key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::validation(format!("override `{item}` has an empty key")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let Value::Object(map) = node else {
            return Err(Error::validation(format!(
                "override `{key}`: `{}` is not a section",
                parts[..i].join(".")
            )));
        };
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
        if node.is_null() {
            *node = Value::Object(Default::default());
        }
    }
    unreachable!("key has at least one part")
}

impl PipelineConfig {
    /// Reads the JSON config (defaults when `path` is `None`), applies
    /// `key=value` overrides and validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut tree = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", p.display())))?
            }
            None => serde_json::to_value(PipelineConfig::default())?,
        };
        for o in overrides {
            apply_override(&mut tree, o)?;
        }
        let cfg: PipelineConfig =
            serde_json::from_value(tree).map_err(|e| Error::validation(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn schema(&self) -> LabelSchema {
        LabelSchema::for_language(&self.language)
    }

    pub fn artifacts(&self) -> Artifacts {
        Artifacts::new(&self.paths.artifacts)
    }

    /// Everything checkable before any data is read. Channel widths are
    /// checked again against the fitted components.
    pub fn validate(&self) -> Result<()> {
        if self.language.trim().is_empty() {
            return Err(Error::validation("language must not be empty"));
        }
        self.schema().validate()?;
        if !(self.dev_ratio > 0.0 && self.dev_ratio < 1.0) {
            return Err(Error::validation(format!("dev_ratio must lie in (0, 1), got {}", self.dev_ratio)));
        }
        if self.tokenizer.vocab_size == 0 {
            return Err(Error::validation("tokenizer.vocab_size must be at least 1"));
        }
        self.tokenizer.unigram.validate()?;
        self.skipgram.validate()?;
        self.contextual.validate()?;
        if self.tfidf.terms == 0 {
            return Err(Error::validation("tfidf.terms must be at least 1"));
        }
        self.train.validate()?;
        if self.skipgram.dim != self.model.hid_dim {
            return Err(Error::validation(format!(
                "skipgram.dim ({}) must equal model.hid_dim ({})",
                self.skipgram.dim, self.model.hid_dim
            )));
        }
        match (self.features.tfidf, self.model.tfidf_dim) {
            (false, Some(d)) if d > 0 => {
                return Err(Error::validation(format!(
                    "model.tfidf_dim is {d} but features.tfidf is off"
                )))
            }
            (true, Some(0)) => return Err(Error::validation("model.tfidf_dim is 0 but features.tfidf is on")),
            (true, Some(d)) if d > self.tfidf.terms => {
                return Err(Error::validation(format!(
                    "model.tfidf_dim ({d}) exceeds tfidf.terms ({})",
                    self.tfidf.terms
                )))
            }
            _ => {}
        }
        let ctx = 2 * self.contextual.hidden;
        match (self.features.contextual, self.model.ctx_dim) {
            (false, Some(d)) if d > 0 => {
                return Err(Error::validation(format!(
                    "model.ctx_dim is {d} but features.contextual is off"
                )))
            }
            (true, Some(d)) if d != ctx => {
                return Err(Error::validation(format!(
                    "model.ctx_dim ({d}) must be twice contextual.hidden ({ctx})"
                )))
            }
            _ => {}
        }
        // placeholder widths; only the shape fields are checked here
        let shape_only = ModelSettings {
            tfidf_dim: None,
            ctx_dim: None,
            ..self.model.clone()
        };
        shape_only.resolve(NUM_SPECIAL + 1, 0, 0).map(|_| ())
    }

    fn train_path(&self) -> Result<&Path> {
        let p = self
            .paths
            .train
            .as_deref()
            .ok_or_else(|| Error::validation("paths.train is not set"))?;
        if !p.exists() {
            return Err(Error::validation(format!("paths.train: {} does not exist", p.display())));
        }
        Ok(p)
    }

    /// Training and dev examples. Without a dev file, a seeded stratified
    /// split of the training file is used.
    pub fn splits(&self) -> Result<(Vec<LabeledExample>, Vec<LabeledExample>)> {
        let schema = self.schema();
        let train = load_examples(self.train_path()?, &schema)?;
        match &self.paths.dev {
            Some(dev) => {
                if !dev.exists() {
                    return Err(Error::validation(format!("paths.dev: {} does not exist", dev.display())));
                }
                Ok((train, load_examples(dev, &schema)?))
            }
            None => {
                let s = split(&train, self.dev_ratio, self.train.seed)?;
                Ok((s.train, s.dev))
            }
        }
    }
}

pub fn load_examples(path: &Path, schema: &LabelSchema) -> Result<Vec<LabeledExample>> {
    let report = load_tsv(path, schema)?;
    for s in &report.skipped {
        log::warn!("{}: skipped {s}", path.display());
    }
    if report.examples.is_empty() {
        return Err(Error::validation(format!("{} contains no usable examples", path.display())));
    }
    Ok(report.examples)
}

/// Fixed file names inside the artifact directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Artifacts {
    pub dir: PathBuf,
}

impl Artifacts {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Artifacts { dir: dir.into() }
    }

    pub fn vocab(&self) -> PathBuf {
        self.dir.join(VOCAB_FILE)
    }

    pub fn skipgram(&self) -> PathBuf {
        self.dir.join(SKIPGRAM_FILE)
    }

    pub fn contextual(&self) -> PathBuf {
        self.dir.join(CONTEXTUAL_FILE)
    }

    pub fn tfidf(&self) -> PathBuf {
        self.dir.join(TFIDF_FILE)
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.dir.join(CHECKPOINT_FILE)
    }

    pub fn metrics(&self) -> PathBuf {
        self.dir.join(METRICS_FILE)
    }

    pub fn history(&self) -> PathBuf {
        self.dir.join(HISTORY_FILE)
    }

    /// Takes the directory's lock file, creating the directory if needed.
    /// Released when the guard drops.
    pub fn lock(&self) -> Result<DirLock> {
        fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        let path = self.dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(DirLock { path }),
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => Err(Error::io(
                &path,
                io::Error::new(
                    io::ErrorKind::AlreadyExists,
                    "artifact directory is in use by another command (delete the lock file if that run died)",
                ),
            )),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact(path.to_path_buf()))
    }
}

/// Subword pieces of each text, as strings, for skip-gram training.
pub fn piece_corpus(vocab: &SubwordVocab, texts: &[String]) -> Vec<Vec<String>> {
    texts
        .iter()
        .map(|t| {
            vocab
                .encode(t)
                .real_ids()
                .iter()
                .map(|&id| vocab.piece(id).to_string())
                .collect()
        })
        .collect()
}

fn normalized_texts(examples: &[LabeledExample]) -> Vec<String> {
    examples.iter().map(|e| normalize_text(&e.text)).collect()
}

/// Learns the subword vocabulary from the training split and writes it to
/// `out` (default: `vocab.json` in the artifact directory).
pub fn train_tokenizer(cfg: &PipelineConfig, out: Option<&Path>) -> Result<SubwordVocab> {
    let (train, _) = cfg.splits()?;
    let artifacts = cfg.artifacts();
    let _lock = artifacts.lock()?;
    let texts = normalized_texts(&train);
    let t = &cfg.tokenizer;
    let vocab = subword::train(&texts, t.kind, t.vocab_size, &t.unigram)?;
    let path = out.map(Path::to_path_buf).unwrap_or_else(|| artifacts.vocab());
    vocab.save(&path)?;
    log::info!("wrote {} ({} pieces)", path.display(), vocab.len());
    Ok(vocab)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedKind {
    Skipgram,
    Contextual,
    Tfidf,
}

impl FromStr for EmbedKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "skipgram" => Ok(EmbedKind::Skipgram),
            "contextual" => Ok(EmbedKind::Contextual),
            "tfidf" => Ok(EmbedKind::Tfidf),
            _ => Err(Error::validation(format!(
                "unknown embedding kind `{s}` (expected skipgram, contextual or tfidf)"
            ))),
        }
    }
}

#[derive(Debug)]
pub enum Embedding {
    Skipgram(SkipgramTable),
    Contextual(ContextualEncoder),
    TfIdf(TfIdfModel),
}

/// Fits one embedding on the training split. `vocab` and `out` default to
/// the artifact directory.
pub fn train_embedding(cfg: &PipelineConfig, kind: EmbedKind, vocab: Option<&Path>, out: Option<&Path>) -> Result<Embedding> {
    let artifacts = cfg.artifacts();
    let vocab_path = vocab.map(Path::to_path_buf).unwrap_or_else(|| artifacts.vocab());
    if kind != EmbedKind::Tfidf {
        require(&vocab_path)?;
    }
    let (train, _) = cfg.splits()?;
    let _lock = artifacts.lock()?;
    let texts = normalized_texts(&train);
    let default_out = match kind {
        EmbedKind::Skipgram => artifacts.skipgram(),
        EmbedKind::Contextual => artifacts.contextual(),
        EmbedKind::Tfidf => artifacts.tfidf(),
    };
    let path = out.map(Path::to_path_buf).unwrap_or(default_out);
    let result = match kind {
        EmbedKind::Skipgram => {
            let v = SubwordVocab::load(&vocab_path)?;
            let table = train_skipgram(&piece_corpus(&v, &texts), &cfg.skipgram)?;
            table.save(&path)?;
            Embedding::Skipgram(table)
        }
        EmbedKind::Contextual => {
            let v = SubwordVocab::load(&vocab_path)?;
            let seqs: Vec<_> = texts.iter().map(|t| v.encode(t)).collect();
            let enc = train_contextual(&seqs, v.len(), &cfg.contextual)?;
            enc.save(&path)?;
            Embedding::Contextual(enc)
        }
        EmbedKind::Tfidf => {
            let docs: Vec<Vec<String>> = texts.iter().map(|t| tfidf_tokens(t)).collect();
            let model = fit_tfidf(&docs, cfg.tfidf.terms)?;
            model.save(&path)?;
            Embedding::TfIdf(model)
        }
    };
    log::info!("wrote {}", path.display());
    Ok(result)
}

/// Components read back from an artifact directory.
#[derive(Debug)]
pub struct LoadedComponents {
    pub vocab: SubwordVocab,
    pub skipgram: Option<SkipgramTable>,
    pub tfidf: Option<TfIdfModel>,
    pub contextual: Option<ContextualEncoder>,
}

impl LoadedComponents {
    pub fn load(artifacts: &Artifacts, skipgram: bool, tfidf: bool, contextual: bool) -> Result<Self> {
        let mut needed = vec![artifacts.vocab()];
        if skipgram {
            needed.push(artifacts.skipgram());
        }
        if tfidf {
            needed.push(artifacts.tfidf());
        }
        if contextual {
            needed.push(artifacts.contextual());
        }
        for p in &needed {
            require(p)?;
        }
        Ok(LoadedComponents {
            vocab: SubwordVocab::load(&artifacts.vocab())?,
            skipgram: skipgram.then(|| SkipgramTable::load(&artifacts.skipgram())).transpose()?,
            tfidf: tfidf.then(|| TfIdfModel::load(&artifacts.tfidf())).transpose()?,
            contextual: contextual
                .then(|| ContextualEncoder::load(&artifacts.contextual()))
                .transpose()?,
        })
    }

    /// The channels a checkpoint was trained with, checked against its
    /// hashes.
    pub fn for_checkpoint(artifacts: &Artifacts, ckpt: &Checkpoint) -> Result<Self> {
        let c = Self::load(artifacts, false, ckpt.hashes.tfidf.is_some(), ckpt.hashes.contextual.is_some())?;
        ckpt.verify(&c.components())?;
        Ok(c)
    }

    pub fn components(&self) -> Components<'_> {
        Components {
            vocab: &self.vocab,
            skipgram: self.skipgram.as_ref(),
            tfidf: self.tfidf.as_ref(),
            contextual: self.contextual.as_ref(),
        }
    }
}

fn write_metrics(path: &Path, report: &MetricsReport) -> Result<()> {
    let text = serde_json::to_string_pretty(&report.to_json())?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Trains the classifier and writes the checkpoint, the epoch history and
/// the dev metrics of the kept parameters.
pub fn train_model(cfg: &PipelineConfig) -> Result<TrainOutcome> {
    let artifacts = cfg.artifacts();
    let loaded = LoadedComponents::load(&artifacts, true, cfg.features.tfidf, cfg.features.contextual)?;
    let comps = loaded.components();
    let model_cfg = cfg.model.resolve(
        loaded.vocab.len(),
        comps.tfidf.map_or(0, |t| t.dim()),
        comps.contextual.map_or(0, |c| c.dim()),
    )?;
    comps.check_config(&model_cfg)?;
    let (train_set, dev_set) = cfg.splits()?;
    let _lock = artifacts.lock()?;
    let outcome = train::train(&train_set, &dev_set, &comps, &cfg.schema(), &model_cfg, &cfg.train)?;
    outcome.checkpoint.save(&artifacts.checkpoint())?;
    write_history(&artifacts.history(), &outcome.checkpoint.history)?;
    write_metrics(&artifacts.metrics(), &outcome.best)?;
    log::info!(
        "kept epoch {} of {}; dev weighted F1 {:.4}",
        outcome.checkpoint.best_epoch,
        outcome.checkpoint.history.len(),
        outcome.best.weighted_f1
    );
    Ok(outcome)
}

/// Scores the trained model on `data`, else `paths.test`, else the dev
/// split, and writes `metrics.json`.
pub fn evaluate_model(cfg: &PipelineConfig, data: Option<&Path>) -> Result<MetricsReport> {
    let artifacts = cfg.artifacts();
    require(&artifacts.checkpoint())?;
    let ckpt = Checkpoint::load(&artifacts.checkpoint())?;
    let loaded = LoadedComponents::for_checkpoint(&artifacts, &ckpt)?;
    let examples = match data.or(cfg.paths.test.as_deref()) {
        Some(p) => {
            if !p.exists() {
                return Err(Error::validation(format!("evaluation data {} does not exist", p.display())));
            }
            load_examples(p, &ckpt.schema)?
        }
        None => cfg.splits()?.1,
    };
    let report = evaluate_examples(&ckpt, &loaded.components(), &examples)?;
    let _lock = artifacts.lock()?;
    write_metrics(&artifacts.metrics(), &report)?;
    Ok(report)
}

pub fn evaluate_examples(ckpt: &Checkpoint, comps: &Components, examples: &[LabeledExample]) -> Result<MetricsReport> {
    if examples.is_empty() {
        return Err(Error::validation("evaluation set is empty"));
    }
    let texts: Vec<&str> = examples.iter().map(|e| e.text.as_str()).collect();
    let feats = comps.featurize(&texts, ckpt.config().max_len)?;
    let labels: Vec<usize> = examples.iter().map(|e| e.label.index()).collect();
    evaluate(&ckpt.params, &feats, &labels, &ckpt.schema)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prediction {
    pub label: String,
    pub probabilities: Vec<f64>,
}

/// A checkpoint with its components, ready for repeated prediction.
#[derive(Debug)]
pub struct Predictor {
    pub checkpoint: Checkpoint,
    pub components: LoadedComponents,
}

impl Predictor {
    /// Loads the checkpoint and the components stored beside it.
    pub fn load(checkpoint: &Path) -> Result<Self> {
        require(checkpoint)?;
        let ckpt = Checkpoint::load(checkpoint)?;
        let dir = checkpoint.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let components = LoadedComponents::for_checkpoint(&Artifacts::new(dir), &ckpt)?;
        Ok(Predictor {
            checkpoint: ckpt,
            components,
        })
    }

    pub fn predict(&self, texts: &[&str]) -> Result<Vec<Prediction>> {
        let ckpt = &self.checkpoint;
        let feats = self.components.components().featurize(texts, ckpt.config().max_len)?;
        Ok(predict(&ckpt.params, &feats, 64)?
            .into_iter()
            .map(|(c, probabilities)| Prediction {
                label: ckpt.schema.labels[c].clone(),
                probabilities,
            })
            .collect())
    }
}
