//! Exact-match entity precision, recall and F1.
//!
//! A predicted span counts as a true positive only when a gold span in the
//! same sentence has the same label, start and end. Zero denominators yield
//! 0, never NaN.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::Serialize;

use crate::corpus::{EntitySpan, LabelSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    fn scores(&self) -> Scores {
        Scores {
            tp: self.tp,
            fp: self.fp,
            fn_: self.fn_,
            precision: self.precision(),
            recall: self.recall(),
            f1: self.f1(),
        }
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Scores {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Micro-averaged totals plus a per-label breakdown.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_label: BTreeMap<String, Scores>,
}

impl Metrics {
    fn from_counts(micro: Counts, per_label: BTreeMap<String, Counts>) -> Self {
        Self {
            tp: micro.tp,
            fp: micro.fp,
            fn_: micro.fn_,
            precision: micro.precision(),
            recall: micro.recall(),
            f1: micro.f1(),
            per_label: per_label.into_iter().map(|(k, c)| (k, c.scores())).collect(),
        }
    }

    /// Fixed-width report. Rows follow `labels` order when given (labels
    /// absent from the data get zero rows), otherwise alphabetical.
    pub fn table(&self, labels: Option<&LabelSet>) -> String {
        let zero = Counts::default().scores();
        let mut rows: Vec<(String, Scores)> = match labels {
            Some(ls) => ls
                .labels()
                .iter()
                .map(|l| (l.clone(), self.per_label.get(l).copied().unwrap_or(zero)))
                .collect(),
            None => Vec::new(),
        };
        for (l, s) in &self.per_label {
            if !rows.iter().any(|(r, _)| r == l) {
                rows.push((l.clone(), *s));
            }
        }
        let micro = Scores {
            tp: self.tp,
            fp: self.fp,
            fn_: self.fn_,
            precision: self.precision,
            recall: self.recall,
            f1: self.f1,
        };
        let width = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max(5);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<width$}  {:>6}  {:>6}  {:>6}  {:>9}  {:>6}  {:>6}",
            "label", "tp", "fp", "fn", "precision", "recall", "f1"
        );
        for (label, s) in rows.iter().chain(std::iter::once(&("micro".to_string(), micro))) {
            let _ = writeln!(
                out,
                "{:<width$}  {:>6}  {:>6}  {:>6}  {:>9.4}  {:>6.4}  {:>6.4}",
                label, s.tp, s.fp, s.fn_, s.precision, s.recall, s.f1
            );
        }
        out
    }
}

/// Scores predicted spans against gold spans, sentence by sentence.
pub fn entity_f1(gold: &[Vec<EntitySpan>], pred: &[Vec<EntitySpan>]) -> Result<Metrics> {
    if gold.len() != pred.len() {
        return Err(Error::LengthMismatch {
            expected: gold.len(),
            actual: pred.len(),
        });
    }
    let mut micro = Counts::default();
    let mut per_label: BTreeMap<String, Counts> = BTreeMap::new();
    for (g, p) in gold.iter().zip(pred) {
        let mut remaining: HashMap<&EntitySpan, usize> = HashMap::new();
        for span in g {
            *remaining.entry(span).or_default() += 1;
        }
        for span in p {
            let c = per_label.entry(span.label.clone()).or_default();
            match remaining.get_mut(span) {
                Some(n) if *n > 0 => {
                    *n -= 1;
                    c.tp += 1;
                    micro.tp += 1;
                }
                _ => {
                    c.fp += 1;
                    micro.fp += 1;
                }
            }
        }
        for (span, n) in remaining {
            if n > 0 {
                per_label.entry(span.label.clone()).or_default().fn_ += n;
                micro.fn_ += n;
            }
        }
    }
    Ok(Metrics::from_counts(micro, per_label))
}
