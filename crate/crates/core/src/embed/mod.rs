//! The three sentence-level inputs of the classifier: subword skip-gram
//! vectors, a contextual sentence encoder and TF-IDF vectors.

mod contextual;
mod skipgram;
mod tfidf;

pub use contextual::{train_contextual, ContextualConfig, ContextualEncoder, CONTEXTUAL_FORMAT_VERSION};
pub use skipgram::{ngram_buckets, train_skipgram, SkipgramConfig, SkipgramTable, SKIPGRAM_FORMAT_VERSION};
pub use tfidf::{fit_tfidf, tfidf_tokens, TfIdfModel, DEFAULT_TFIDF_TERMS, TFIDF_FORMAT_VERSION};
