use std::fmt;

use serde_json::{json, Map, Value};

use crate::error::{Error, Result};

/// Rows are true classes, columns predicted classes.
pub type Confusion = Vec<Vec<u64>>;

pub fn confusion_matrix(truth: &[usize], pred: &[usize], n_classes: usize) -> Result<Confusion> {
    if truth.len() != pred.len() {
        return Err(Error::validation(format!(
            "{} labels but {} predictions",
            truth.len(),
            pred.len()
        )));
    }
    let mut m = vec![vec![0u64; n_classes]; n_classes];
    for (&t, &p) in truth.iter().zip(pred) {
        if t >= n_classes || p >= n_classes {
            return Err(Error::validation(format!(
                "class index {} out of range for {n_classes} classes",
                t.max(p)
            )));
        }
        m[t][p] += 1;
    }
    Ok(m)
}

fn check(conf: &[Vec<u64>]) -> Result<u64> {
    let n = conf.len();
    if n == 0 || conf.iter().any(|r| r.len() != n) {
        return Err(Error::validation("confusion matrix must be square and non-empty"));
    }
    let total: u64 = conf.iter().flatten().sum();
    if total == 0 {
        return Err(Error::validation("confusion matrix has no examples"));
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

/// Per-class scores. A ratio with a zero denominator is 0.
fn per_class(conf: &[Vec<u64>]) -> Vec<ClassMetrics> {
    let n = conf.len();
    (0..n)
        .map(|c| {
            let tp = conf[c][c] as f64;
            let support: u64 = conf[c].iter().sum();
            let predicted: u64 = (0..n).map(|r| conf[r][c]).sum();
            let ratio = |num: f64, den: u64| if den == 0 { 0.0 } else { num / den as f64 };
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassMetrics {
                precision,
                recall,
                f1,
                support,
            }
        })
        .collect()
}

pub fn accuracy(conf: &[Vec<u64>]) -> Result<f64> {
    let total = check(conf)?;
    let correct: u64 = (0..conf.len()).map(|c| conf[c][c]).sum();
    Ok(correct as f64 / total as f64)
}

/// Support-weighted mean of per-class F1.
pub fn weighted_f1(conf: &[Vec<u64>]) -> Result<f64> {
    let total = check(conf)? as f64;
    let weighted: f64 = per_class(conf).iter().map(|m| m.support as f64 * m.f1).sum();
    Ok(weighted / total)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub labels: Vec<String>,
    pub accuracy: f64,
    pub weighted_f1: f64,
    pub per_class: Vec<ClassMetrics>,
    pub confusion: Confusion,
}

impl MetricsReport {
    pub fn from_confusion(confusion: Confusion, labels: &[String]) -> Result<Self> {
        check(&confusion)?;
        if labels.len() != confusion.len() {
            return Err(Error::validation(format!(
                "{} label names for a {}-class confusion matrix",
                labels.len(),
                confusion.len()
            )));
        }
        Ok(MetricsReport {
            labels: labels.to_vec(),
            accuracy: accuracy(&confusion)?,
            weighted_f1: weighted_f1(&confusion)?,
            per_class: per_class(&confusion),
            confusion,
        })
    }

    pub fn from_predictions(truth: &[usize], pred: &[usize], labels: &[String]) -> Result<Self> {
        if truth.is_empty() {
            return Err(Error::validation("cannot compute metrics on an empty set"));
        }
        Self::from_confusion(confusion_matrix(truth, pred, labels.len())?, labels)
    }

    pub fn total(&self) -> u64 {
        self.confusion.iter().flatten().sum()
    }

    /// `{accuracy, weighted_f1, per_class: {label: {precision, recall, f1, support}}, confusion}`
    pub fn to_json(&self) -> Value {
        let mut per_class = Map::new();
        for (label, m) in self.labels.iter().zip(&self.per_class) {
            per_class.insert(
                label.clone(),
                json!({
                    "precision": m.precision,
                    "recall": m.recall,
                    "f1": m.f1,
                    "support": m.support,
                }),
            );
        }
        json!({
            "accuracy": self.accuracy,
            "weighted_f1": self.weighted_f1,
            "per_class": per_class,
            "confusion": self.confusion,
        })
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let w = self.labels.iter().map(|l| l.len()).max().unwrap_or(0).max(12);
        writeln!(f, "{:<w$}  {:>9}  {:>9}  {:>9}  {:>7}", "", "precision", "recall", "f1-score", "support")?;
        for (label, m) in self.labels.iter().zip(&self.per_class) {
            writeln!(
                f,
                "{label:<w$}  {:>9.4}  {:>9.4}  {:>9.4}  {:>7}",
                m.precision, m.recall, m.f1, m.support
            )?;
        }
        writeln!(f)?;
        let total = self.total();
        writeln!(f, "{:<w$}  {:>9}  {:>9}  {:>9.4}  {total:>7}", "accuracy", "", "", self.accuracy)?;
        let avg = |get: fn(&ClassMetrics) -> f64| {
            self.per_class
                .iter()
                .map(|m| m.support as f64 * get(m))
                .sum::<f64>()
                / total as f64
        };
        writeln!(
            f,
            "{:<w$}  {:>9.4}  {:>9.4}  {:>9.4}  {total:>7}",
            "weighted avg",
            avg(|m| m.precision),
            avg(|m| m.recall),
            self.weighted_f1
        )?;
        writeln!(f)?;
        writeln!(f, "confusion (rows = true, columns = predicted)")?;
        for (label, row) in self.labels.iter().zip(&self.confusion) {
            write!(f, "{label:<w$}")?;
            for v in row {
                write!(f, "  {v:>6}")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}
