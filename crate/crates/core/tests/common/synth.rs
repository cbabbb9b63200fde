//! Synthetic code-mixed corpora and a tiny pipeline configuration.

use std::path::Path;

use cmsenti::corpus::{write_tsv, Label, LabelSchema, LabeledExample};
use cmsenti::pipeline::{train_embedding, train_tokenizer, EmbedKind, LoadedComponents, PipelineConfig};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Words that only ever appear with one label, in logit order.
pub const CLASS_WORDS: [[&str; 6]; 5] = [
    ["semma", "super", "அருமை", "mass", "vera", "thalaiva"],
    ["mosam", "waste", "மோசம்", "boring", "kevalam", "flop"],
    ["paravala", "okay", "ஓகே", "average", "konjam", "sumar"],
    ["bahut", "accha", "kya", "hai", "nahi", "yaar"],
    ["trailer", "eppo", "release", "date", "எப்போ", "update"],
];

pub const FILLER: [&str; 8] = ["intha", "padam", "movie", "the", "da", "bro", "படம்", "song"];

pub fn schema() -> LabelSchema {
    LabelSchema::for_language("tamil")
}

fn sentence(rng: &mut ChaCha8Rng, class: usize, signal: f64) -> String {
    let mut words: Vec<&str> = Vec::new();
    for _ in 0..3 {
        let c = if rng.gen_bool(signal) { class } else { rng.gen_range(0..5) };
        words.push(CLASS_WORDS[c].choose(rng).unwrap());
    }
    for _ in 0..rng.gen_range(1..=3) {
        words.push(FILLER.choose(rng).unwrap());
    }
    words.shuffle(rng);
    words.join(" ")
}

/// `per_class` examples of each label. Each class word is drawn from the
/// example's own class with probability `signal`, otherwise from a random
/// class.
pub fn corpus(per_class: usize, signal: f64, seed: u64) -> Vec<LabeledExample> {
    corpus_of(per_class * 5, signal, seed)
}

/// `n` examples with labels assigned round-robin.
pub fn corpus_of(n: usize, signal: f64, seed: u64) -> Vec<LabeledExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for i in 0..n {
        let class = i % 5;
        out.push(LabeledExample {
            text: sentence(&mut rng, class, signal),
            label: Label::ALL[class],
        });
    }
    out
}

pub fn write(path: &Path, examples: &[LabeledExample]) {
    write_tsv(path, examples, &schema()).unwrap();
}

/// Small dimensions that train in seconds.
pub fn tiny_config(artifacts: &Path, train: &Path, dev: Option<&Path>) -> PipelineConfig {
    let mut sets = vec![
        format!("paths.artifacts={}", serde_json::to_string(artifacts).unwrap()),
        format!("paths.train={}", serde_json::to_string(train).unwrap()),
        "tokenizer.vocab_size=120".into(),
        "skipgram.dim=16".into(),
        "skipgram.epochs=5".into(),
        "skipgram.buckets=4000".into(),
        "skipgram.window=3".into(),
        "contextual.emb_dim=12".into(),
        "contextual.hidden=12".into(),
        "contextual.epochs=3".into(),
        "contextual.batch_size=16".into(),
        "contextual.lr=0.01".into(),
        "tfidf.terms=200".into(),
        "model.hid_dim=16".into(),
        "model.n_heads=2".into(),
        "model.pf_dim=32".into(),
        "model.gru_hidden=16".into(),
        "model.max_len=32".into(),
        "train.lr=0.005".into(),
        "train.batch_size=16".into(),
        "train.max_epochs=20".into(),
        "train.patience=20".into(),
        "train.seed=7".into(),
    ];
    if let Some(d) = dev {
        sets.push(format!("paths.dev={}", serde_json::to_string(d).unwrap()));
    }
    PipelineConfig::load(None, &sets).unwrap()
}

pub fn with(cfg: &PipelineConfig, sets: &[&str]) -> PipelineConfig {
    let mut tree = serde_json::to_value(cfg).unwrap();
    for s in sets {
        let (k, v) = s.split_once('=').unwrap();
        let mut node = &mut tree;
        for part in k.split('.') {
            node = node.get_mut(part).unwrap_or_else(|| panic!("no config key {k}"));
        }
        *node = serde_json::from_str(v).unwrap();
    }
    let cfg: PipelineConfig = serde_json::from_value(tree).unwrap();
    cfg.validate().unwrap();
    cfg
}

/// Runs the tokenizer and all three embedding steps.
pub fn fit_components(cfg: &PipelineConfig) -> LoadedComponents {
    train_tokenizer(cfg, None).unwrap();
    for kind in [EmbedKind::Skipgram, EmbedKind::Contextual, EmbedKind::Tfidf] {
        train_embedding(cfg, kind, None, None).unwrap();
    }
    LoadedComponents::load(&cfg.artifacts(), true, true, true).unwrap()
}
