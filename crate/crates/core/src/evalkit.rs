//! Recognition metrics: expression rate, error-tolerant rates, bracket
//! accuracy, complexity buckets and parent accuracy.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::treebank::{brackets_balanced_tokens, complexity_of, ParentAnnotation};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EvalError {
    #[error("{preds} predictions for {refs} references")]
    LengthMismatch { preds: usize, refs: usize },
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("no gold position has a parent")]
    Undefined,
}

/// Levenshtein distance over tokens with unit costs.
pub fn token_edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Complexity bucket label; everything from 5 up shares one bucket.
pub fn bucket_label(complexity: usize) -> String {
    if complexity >= 5 {
        "5+".to_string()
    } else {
        complexity.to_string()
    }
}

fn bucket_order(label: &str) -> usize {
    label.trim_end_matches('+').parse().unwrap_or(usize::MAX)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub complexity: String,
    pub n: usize,
    pub exprate: f64,
    pub le1: f64,
    pub le2: f64,
    pub bracket_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub exprate: f64,
    pub le1: f64,
    pub le2: f64,
    pub bracket_accuracy: f64,
    /// Occupied buckets in complexity order.
    pub buckets: Vec<Bucket>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub parent_accuracy: Option<f64>,
}

#[derive(Default)]
struct Tally {
    n: usize,
    exact: usize,
    le1: usize,
    le2: usize,
    balanced: usize,
}

impl Tally {
    fn add(&mut self, dist: usize, balanced: bool) {
        self.n += 1;
        self.exact += usize::from(dist == 0);
        self.le1 += usize::from(dist <= 1);
        self.le2 += usize::from(dist <= 2);
        self.balanced += usize::from(balanced);
    }

    fn pct(&self, k: usize) -> f64 {
        100.0 * k as f64 / self.n as f64
    }
}

/// Scores predictions against references. Buckets follow the reference's
/// structural complexity; unparseable references go to bucket 0.
pub fn evaluate<S: AsRef<str>>(preds: &[Vec<S>], refs: &[Vec<S>]) -> Result<EvalReport, EvalError> {
    if preds.len() != refs.len() {
        return Err(EvalError::LengthMismatch { preds: preds.len(), refs: refs.len() });
    }
    if preds.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    let mut total = Tally::default();
    let mut buckets: BTreeMap<usize, (String, Tally)> = BTreeMap::new();
    for (p, r) in preds.iter().zip(refs) {
        let ps: Vec<&str> = p.iter().map(AsRef::as_ref).collect();
        let rs: Vec<&str> = r.iter().map(AsRef::as_ref).collect();
        let dist = token_edit_distance(&ps, &rs);
        let balanced = brackets_balanced_tokens(&ps);
        total.add(dist, balanced);
        let label = bucket_label(complexity_of(&rs).unwrap_or(0));
        buckets
            .entry(bucket_order(&label))
            .or_insert_with(|| (label.clone(), Tally::default()))
            .1
            .add(dist, balanced);
    }
    Ok(EvalReport {
        n: total.n,
        exprate: total.pct(total.exact),
        le1: total.pct(total.le1),
        le2: total.pct(total.le2),
        bracket_accuracy: total.pct(total.balanced),
        buckets: buckets
            .into_values()
            .map(|(complexity, t)| Bucket {
                complexity,
                n: t.n,
                exprate: t.pct(t.exact),
                le1: t.pct(t.le1),
                le2: t.pct(t.le2),
                bracket_accuracy: t.pct(t.balanced),
            })
            .collect(),
        parent_accuracy: None,
    })
}

/// Correct parents over gold positions that have one.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ParentCount {
    pub correct: usize,
    pub total: usize,
}

impl ParentCount {
    pub fn add(&mut self, other: ParentCount) {
        self.correct += other.correct;
        self.total += other.total;
    }

    pub fn fraction(&self) -> Result<f64, EvalError> {
        if self.total == 0 {
            Err(EvalError::Undefined)
        } else {
            Ok(self.correct as f64 / self.total as f64)
        }
    }
}

pub fn parent_counts(pred: &ParentAnnotation, gold: &ParentAnnotation) -> Result<ParentCount, EvalError> {
    if pred.len() != gold.len() {
        return Err(EvalError::LengthMismatch { preds: pred.len(), refs: gold.len() });
    }
    let mut c = ParentCount::default();
    for i in 0..gold.len() {
        if let Some(g) = gold.parent(i) {
            c.total += 1;
            c.correct += usize::from(pred.parent(i) == Some(g));
        }
    }
    Ok(c)
}

/// Fraction of gold positions with a parent whose parent is predicted.
pub fn parent_accuracy(pred: &ParentAnnotation, gold: &ParentAnnotation) -> Result<f64, EvalError> {
    parent_counts(pred, gold)?.fraction()
}

pub const CSV_HEADER: &str = "complexity,n,exprate,le1,le2,bracket_acc";

fn fmt_pct(v: f64) -> String {
    format!("{v:.4}")
}

impl EvalReport {
    /// One row per occupied bucket plus a TOTAL row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        let rows = self.buckets.iter().map(|b| (b.complexity.as_str(), b.n, b.exprate, b.le1, b.le2, b.bracket_accuracy));
        let total = ("TOTAL", self.n, self.exprate, self.le1, self.le2, self.bracket_accuracy);
        for (c, n, e, l1, l2, br) in rows.chain(std::iter::once(total)) {
            let _ = writeln!(out, "{c},{n},{},{},{},{}", fmt_pct(e), fmt_pct(l1), fmt_pct(l2), fmt_pct(br));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }
}

/// Bucket-aligned differences `on - off`; buckets missing from either side
/// count as empty.
pub fn delta_csv(off: &EvalReport, on: &EvalReport) -> String {
    let mut labels: Vec<&str> = off.buckets.iter().chain(&on.buckets).map(|b| b.complexity.as_str()).collect();
    labels.sort_by_key(|l| bucket_order(l));
    labels.dedup();
    let find = |r: &'_ EvalReport, l: &str| r.buckets.iter().find(|b| b.complexity == l).cloned().unwrap_or_default();
    let mut out = String::from(
        "complexity,n,exprate_off,exprate_on,exprate_delta,bracket_acc_off,bracket_acc_on,bracket_acc_delta\n",
    );
    let mut row = |label: &str, n: usize, a: (f64, f64), b: (f64, f64)| {
        let _ = writeln!(
            out,
            "{label},{n},{},{},{},{},{},{}",
            fmt_pct(a.0),
            fmt_pct(b.0),
            fmt_pct(b.0 - a.0),
            fmt_pct(a.1),
            fmt_pct(b.1),
            fmt_pct(b.1 - a.1)
        );
    };
    for l in labels {
        let (a, b) = (find(off, l), find(on, l));
        row(l, a.n.max(b.n), (a.exprate, a.bracket_accuracy), (b.exprate, b.bracket_accuracy));
    }
    row("TOTAL", off.n, (off.exprate, off.bracket_accuracy), (on.exprate, on.bracket_accuracy));
    out
}
