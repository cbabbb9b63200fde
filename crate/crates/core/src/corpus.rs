//! Labeled comment datasets: TSV ingestion, text normalization and
//! stratified train/dev splitting.

use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};

pub const NUM_LABELS: usize = 5;

/// Sentiment classes in logit order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    Positive,
    Negative,
    MixedFeelings,
    NotLanguage,
    UnknownState,
}

impl Label {
    pub const ALL: [Label; NUM_LABELS] = [
        Label::Positive,
        Label::Negative,
        Label::MixedFeelings,
        Label::NotLanguage,
        Label::UnknownState,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Label> {
        Label::ALL.get(i).copied()
    }
}

/// The five label names as they appear in data files. Order defines logit
/// positions and never changes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSchema {
    pub language_tag: String,
    pub labels: Vec<String>,
}

impl LabelSchema {
    pub fn for_language(tag: &str) -> Self {
        let tag = tag.trim().to_lowercase();
        LabelSchema {
            labels: vec![
                "positive".into(),
                "negative".into(),
                "mixed_feelings".into(),
                format!("not_{tag}"),
                "unknown_state".into(),
            ],
            language_tag: tag,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.len() != NUM_LABELS {
            return Err(Error::validation(format!(
                "schema.labels: expected {NUM_LABELS} labels, got {}",
                self.labels.len()
            )));
        }
        for (i, a) in self.labels.iter().enumerate() {
            if a.trim().is_empty() {
                return Err(Error::validation(format!("schema.labels[{i}] is empty")));
            }
            if self.labels[..i].iter().any(|b| canonical_label(a) == canonical_label(b)) {
                return Err(Error::validation(format!("schema.labels: duplicate label {a}")));
            }
        }
        Ok(())
    }

    pub fn name(&self, label: Label) -> &str {
        &self.labels[label.index()]
    }

    /// Matches case-insensitively and treats `-`, `_` and spaces alike, so the
    /// shared-task spellings (`Mixed_feelings`, `not-Tamil`) resolve.
    pub fn parse(&self, raw: &str) -> Option<Label> {
        let key = canonical_label(raw);
        self.labels
            .iter()
            .position(|l| canonical_label(l) == key)
            .and_then(Label::from_index)
    }
}

fn canonical_label(s: &str) -> String {
    s.trim()
        .chars()
        .map(|c| if c == '-' || c == ' ' { '_' } else { c })
        .flat_map(char::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub text: String,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkippedLine {
    pub line: usize,
    pub reason: String,
}

impl fmt::Display for SkippedLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.reason)
    }
}

#[derive(Debug, Clone, Default)]
pub struct LoadReport {
    pub examples: Vec<LabeledExample>,
    pub skipped: Vec<SkippedLine>,
}

/// Fraction of malformed lines above which loading fails outright. A single
/// bad line is always tolerated.
pub const MAX_MALFORMED_FRACTION: f64 = 0.10;

/// Reads `text<TAB>label` lines. Blank lines are ignored; malformed lines are
/// reported and skipped.
pub fn load_tsv(path: &Path, schema: &LabelSchema) -> Result<LoadReport> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let content = String::from_utf8(bytes).map_err(|e| {
        Error::Parse(format!("{}: not valid UTF-8: {e}", path.display()))
    })?;
    let report = parse_tsv(&content, schema);
    let total = report.examples.len() + report.skipped.len();
    let bad = report.skipped.len();
    if bad > 1 && bad as f64 > MAX_MALFORMED_FRACTION * total as f64 {
        let first = report.skipped.first().map(|s| s.to_string()).unwrap_or_default();
        return Err(Error::validation(format!(
            "{}: {bad} of {total} lines malformed (limit {:.0}%); first: {first}",
            path.display(),
            MAX_MALFORMED_FRACTION * 100.0
        )));
    }
    Ok(report)
}

pub fn parse_tsv(content: &str, schema: &LabelSchema) -> LoadReport {
    let mut report = LoadReport::default();
    for (i, line) in content.split('\n').enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        let skip = |reason: String| SkippedLine {
            line: lineno,
            reason,
        };
        let Some((text, label)) = line.rsplit_once('\t') else {
            report.skipped.push(skip("missing tab separator".into()));
            continue;
        };
        let Some(label) = schema.parse(label) else {
            report
                .skipped
                .push(skip(format!("label {:?} not in schema", label.trim())));
            continue;
        };
        if normalize_text(text).is_empty() {
            report.skipped.push(skip("empty text".into()));
            continue;
        }
        report.examples.push(LabeledExample {
            text: text.to_string(),
            label,
        });
    }
    report
}

/// Writes examples in the format [`load_tsv`] reads.
pub fn write_tsv(path: &Path, examples: &[LabeledExample], schema: &LabelSchema) -> Result<()> {
    let mut out = String::new();
    for (i, ex) in examples.iter().enumerate() {
        if ex.text.contains(['\t', '\n', '\r']) {
            return Err(Error::validation(format!(
                "example {i}: text contains a tab or line break"
            )));
        }
        out.push_str(&ex.text);
        out.push('\t');
        out.push_str(schema.name(ex.label));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn is_latin(c: char) -> bool {
    matches!(c,
        'A'..='Z' | 'a'..='z'
        | '\u{00C0}'..='\u{024F}'
        | '\u{1E00}'..='\u{1EFF}'
        | '\u{2C60}'..='\u{2C7F}'
        | '\u{A720}'..='\u{A7FF}'
        | '\u{FF21}'..='\u{FF3A}'
        | '\u{FF41}'..='\u{FF5A}')
}

/// NFC composition, lowercasing of Latin letters only, whitespace collapsed to
/// single spaces and trimmed.
pub fn normalize_text(raw: &str) -> String {
    let composed: String = raw.nfc().collect();
    let lowered: String = composed
        .chars()
        .flat_map(|c| {
            let mut buf = [c, '\0', '\0'];
            let mut n = 1;
            if is_latin(c) {
                n = 0;
                for l in c.to_lowercase() {
                    buf[n] = l;
                    n += 1;
                }
            }
            buf.into_iter().take(n)
        })
        .collect();
    let recomposed: String = lowered.nfc().collect();
    recomposed.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<LabeledExample>,
    pub dev: Vec<LabeledExample>,
    pub seed: u64,
}

/// Stratified split. Per-class dev quotas use largest-remainder rounding so
/// that the dev side holds `round(n · dev_ratio)` examples overall. Both sides
/// keep input order.
pub fn split(data: &[LabeledExample], dev_ratio: f64, seed: u64) -> Result<DatasetSplit> {
    if data.len() < 2 {
        return Err(Error::validation("split needs at least 2 examples"));
    }
    if !(dev_ratio > 0.0 && dev_ratio < 1.0) {
        return Err(Error::validation(format!(
            "dev_ratio must be in (0, 1), got {dev_ratio}"
        )));
    }
    let n = data.len();
    let dev_total = (n as f64 * dev_ratio).round() as usize;
    if dev_total == 0 || dev_total == n {
        return Err(Error::validation(format!(
            "dev_ratio {dev_ratio} on {n} examples leaves one side empty"
        )));
    }

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); NUM_LABELS];
    for (i, ex) in data.iter().enumerate() {
        by_class[ex.label.index()].push(i);
    }
    let quotas: Vec<f64> = by_class.iter().map(|c| c.len() as f64 * dev_ratio).collect();
    let mut take: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut remaining = dev_total - take.iter().sum::<usize>().min(dev_total);
    let mut order: Vec<usize> = (0..NUM_LABELS).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    while remaining > 0 {
        let mut progressed = false;
        for &c in &order {
            if remaining > 0 && take[c] < by_class[c].len() {
                take[c] += 1;
                remaining -= 1;
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut in_dev = vec![false; n];
    for (class, members) in by_class.iter().enumerate() {
        let mut shuffled = members.clone();
        shuffled.shuffle(&mut rng);
        for &i in shuffled.iter().take(take[class]) {
            in_dev[i] = true;
        }
    }
    let (dev, train): (Vec<_>, Vec<_>) = data
        .iter()
        .zip(&in_dev)
        .partition(|(_, &d)| d);
    Ok(DatasetSplit {
        train: train.into_iter().map(|(e, _)| e.clone()).collect(),
        dev: dev.into_iter().map(|(e, _)| e.clone()).collect(),
        seed,
    })
}
