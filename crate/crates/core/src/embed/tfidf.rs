use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TFIDF_FORMAT_VERSION: u32 = 1;

/// Default number of retained terms.
pub const DEFAULT_TFIDF_TERMS: usize = 5000;

/// Top-K terms by document frequency with smoothed idf weights.
#[derive(Debug, Clone, PartialEq)]
pub struct TfIdfModel {
    terms: Vec<String>,
    idf: Vec<f64>,
    index: HashMap<String, usize>,
    num_docs: usize,
}

#[derive(Serialize, Deserialize)]
struct TfIdfFile {
    version: u32,
    num_docs: usize,
    terms: Vec<String>,
    idf: Vec<f64>,
}

/// Whitespace tokens of normalized text.
pub fn tfidf_tokens(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_string).collect()
}

/// Keeps the `k` terms with the highest document frequency, ties broken by
/// term order. `idf(t) = ln((1 + N) / (1 + df(t))) + 1`.
pub fn fit_tfidf(docs: &[Vec<String>], k: usize) -> Result<TfIdfModel> {
    if docs.is_empty() {
        return Err(Error::validation("tf-idf corpus is empty"));
    }
    if k == 0 {
        return Err(Error::validation("tf-idf term count must be at least 1"));
    }
    let mut df: BTreeMap<&str, usize> = BTreeMap::new();
    for doc in docs {
        let unique: BTreeSet<&str> = doc.iter().map(String::as_str).collect();
        for t in unique {
            *df.entry(t).or_default() += 1;
        }
    }
    if df.is_empty() {
        return Err(Error::validation("tf-idf corpus contains no terms"));
    }
    let mut ranked: Vec<(&str, usize)> = df.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked.truncate(k);
    let n = docs.len() as f64;
    let terms: Vec<String> = ranked.iter().map(|(t, _)| t.to_string()).collect();
    let idf = ranked
        .iter()
        .map(|&(_, d)| ((1.0 + n) / (1.0 + d as f64)).ln() + 1.0)
        .collect();
    Ok(TfIdfModel::from_parts(terms, idf, docs.len()))
}

impl TfIdfModel {
    fn from_parts(terms: Vec<String>, idf: Vec<f64>, num_docs: usize) -> Self {
        let index = terms.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        TfIdfModel {
            terms,
            idf,
            index,
            num_docs,
        }
    }

    /// Output dimensionality (number of retained terms).
    pub fn dim(&self) -> usize {
        self.terms.len()
    }

    pub fn terms(&self) -> &[String] {
        &self.terms
    }

    pub fn idf(&self, term: &str) -> Option<f64> {
        self.index.get(term).map(|&i| self.idf[i])
    }

    pub fn num_docs(&self) -> usize {
        self.num_docs
    }

    /// Count-weighted idf vector, L2-normalized unless it is all zero.
    pub fn sentence_vector<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<f32> {
        let mut v = vec![0.0f64; self.terms.len()];
        for t in tokens {
            if let Some(&i) = self.index.get(t.as_ref()) {
                v[i] += self.idf[i];
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter().map(|x| (x / norm) as f32).collect()
        } else {
            vec![0.0; v.len()]
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&TfIdfFile {
            version: TFIDF_FORMAT_VERSION,
            num_docs: self.num_docs,
            terms: self.terms.clone(),
            idf: self.idf.clone(),
        })?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: TfIdfFile = serde_json::from_str(s)?;
        if f.version != TFIDF_FORMAT_VERSION {
            return Err(Error::Version {
                what: "tf-idf model",
                found: f.version,
                expected: TFIDF_FORMAT_VERSION,
            });
        }
        if f.terms.len() != f.idf.len() || f.terms.is_empty() {
            return Err(Error::validation("tf-idf model terms and idf lengths differ"));
        }
        if f.idf.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::validation("tf-idf weights must be positive and finite"));
        }
        Ok(Self::from_parts(f.terms, f.idf, f.num_docs))
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

#[cfg(test)]
mod tests {
    use super::*;

    fn docs(d: &[&str]) -> Vec<Vec<String>> {
        d.iter().map(|s| tfidf_tokens(s)).collect()
    }

    #[test]
    fn idf_matches_hand_values() {
        let m = fit_tfidf(&docs(&["a b", "a c", "a d"]), 4).unwrap();
        assert_eq!(m.idf("a"), Some(1.0));
        assert!((m.idf("b").unwrap() - (2.0f64.ln() + 1.0)).abs() < 1e-12);
        assert_eq!(m.terms(), ["a", "b", "c", "d"]);
    }

    #[test]
    fn sentence_vector_hand_case() {
        let m = fit_tfidf(&docs(&["a b", "a c", "a d"]), 4).unwrap();
        let v = m.sentence_vector(&["a", "a", "b"]);
        let raw = [2.0, 2.0f64.ln() + 1.0, 0.0, 0.0];
        let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
        for (got, want) in v.iter().zip(raw) {
            assert!((*got as f64 - want / norm).abs() < 1e-7);
        }
        assert_eq!(m.sentence_vector(&["zzz"]), vec![0.0; 4]);
    }

    #[test]
    fn truncation_and_ties() {
        let m = fit_tfidf(&docs(&["x y", "y z"]), 10).unwrap();
        assert_eq!(m.dim(), 3);
        let m = fit_tfidf(&docs(&["q p", "r"]), 2).unwrap();
        assert_eq!(m.terms(), ["p", "q"]);
    }

    #[test]
    fn json_round_trip() {
        let m = fit_tfidf(&docs(&["a b", "a c"]), 3).unwrap();
        assert_eq!(TfIdfModel::from_json(&m.to_json().unwrap()).unwrap(), m);
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(fit_tfidf(&[], 3).is_err());
        assert!(fit_tfidf(&docs(&["a"]), 0).is_err());
    }
}
