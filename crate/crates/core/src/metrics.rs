//! Ranking metrics for multi-label prediction: per-class average precision,
//! mAP over a class subset, and overall precision/recall/F1 at top-k.
//!
//! Ties are always broken by ascending index (record index when ranking a
//! class column, class index when ranking a record row).

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

/// Scores and ground truth for `records x classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable<T> {
    scores: Matrix<T>,
    truths: Vec<bool>,
}

impl<T: Scalar> ScoreTable<T> {
    /// `truths` is row-major with the same shape as `scores`.
    pub fn new(scores: Matrix<T>, truths: Vec<bool>) -> Result<Self> {
        if truths.len() != scores.len() {
            return Err(Error::dim("ScoreTable", scores.shape(), (truths.len(), 1)));
        }
        Ok(Self { scores, truths })
    }

    /// Builds truths from each record's list of positive column indices.
    pub fn from_label_sets<L: AsRef<[usize]>>(scores: Matrix<T>, labels: &[L]) -> Result<Self> {
        if labels.len() != scores.rows() {
            return Err(Error::dim("ScoreTable", scores.shape(), (labels.len(), scores.cols())));
        }
        let cols = scores.cols();
        let mut truths = vec![false; scores.len()];
        for (r, set) in labels.iter().enumerate() {
            for &c in set.as_ref() {
                if c >= cols {
                    return Err(Error::Argument(format!("label column {c} out of range for {cols} classes")));
                }
                truths[r * cols + c] = true;
            }
        }
        Ok(Self { scores, truths })
    }

    pub fn records(&self) -> usize {
        self.scores.rows()
    }

    pub fn classes(&self) -> usize {
        self.scores.cols()
    }

    pub fn scores(&self) -> &Matrix<T> {
        &self.scores
    }

    pub fn truth(&self, record: usize, class: usize) -> bool {
        self.truths[record * self.classes() + class]
    }

    pub fn class_scores(&self, class: usize) -> Vec<T> {
        (0..self.records()).map(|r| self.scores.get(r, class)).collect()
    }

    pub fn class_truths(&self, class: usize) -> Vec<bool> {
        (0..self.records()).map(|r| self.truth(r, class)).collect()
    }

    pub fn positives(&self, class: usize) -> usize {
        (0..self.records()).filter(|&r| self.truth(r, class)).count()
    }
}

/// Indices ordered by descending score, ties by ascending index.
fn ranking<T: Scalar>(scores: &[T]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].as_f64().total_cmp(&scores[a].as_f64()).then(a.cmp(&b)));
    order
}

/// Average precision of one class column, or `None` when it has no positives.
pub fn average_precision<T: Scalar>(scores: &[T], truths: &[bool]) -> Result<Option<f64>> {
    if scores.is_empty() {
        return Err(Error::Argument("average precision over zero records".into()));
    }
    if scores.len() != truths.len() {
        return Err(Error::dim("average_precision", (scores.len(), 1), (truths.len(), 1)));
    }
    let mut hits = 0usize;
    let mut total = 0.0;
    for (rank, &r) in ranking(scores).iter().enumerate() {
        if truths[r] {
            hits += 1;
            total += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok((hits > 0).then(|| total / hits as f64))
}

/// Per-class AP for the requested columns, `None` for zero-positive classes.
pub fn per_class_ap<T: Scalar>(table: &ScoreTable<T>, classes: &[usize]) -> Result<Vec<Option<f64>>> {
    classes
        .iter()
        .map(|&c| {
            if c >= table.classes() {
                return Err(Error::Argument(format!("class column {c} out of range")));
            }
            average_precision(&table.class_scores(c), &table.class_truths(c))
        })
        .collect()
}

/// Unweighted mean AP over `classes`, skipping classes without positives.
pub fn mean_average_precision<T: Scalar>(table: &ScoreTable<T>, classes: &[usize]) -> Result<f64> {
    if classes.is_empty() {
        return Err(Error::Argument("mAP over an empty class subset".into()));
    }
    mean_of_defined(&per_class_ap(table, classes)?)
}

fn mean_of_defined(aps: &[Option<f64>]) -> Result<f64> {
    let defined: Vec<f64> = aps.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::Evaluation("no class in the subset has a positive record".into()));
    }
    Ok(defined.iter().sum::<f64>() / defined.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TopK {
    pub k: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Column indices of the `k` highest scores in a row.
pub fn top_k<T: Scalar>(row: &[T], k: usize) -> Vec<usize> {
    let mut order = ranking(row);
    order.truncate(k);
    order
}

/// Overall precision/recall/F1 when every record predicts its top `k` classes.
pub fn f1_at_k<T: Scalar>(table: &ScoreTable<T>, k: usize) -> Result<TopK> {
    if k == 0 || k > table.classes() {
        return Err(Error::Argument(format!(
            "k must be in 1..={} for this table, got {k}",
            table.classes()
        )));
    }
    if table.records() == 0 {
        return Err(Error::Argument("F1 over zero records".into()));
    }
    let mut hits = 0usize;
    let mut positives = 0usize;
    for r in 0..table.records() {
        hits += top_k(table.scores.row(r), k)
            .into_iter()
            .filter(|&c| table.truth(r, c))
            .count();
        positives += (0..table.classes()).filter(|&c| table.truth(r, c)).count();
    }
    let precision = hits as f64 / (k * table.records()) as f64;
    let recall = if positives == 0 { 0.0 } else { hits as f64 / positives as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(TopK {
        k,
        precision,
        recall,
        f1,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class: String,
    pub ap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub map: f64,
    pub per_class: Vec<ClassAp>,
    pub top_k: Vec<TopK>,
    pub records: usize,
    pub classes: usize,
}

impl MetricsReport {
    /// mAP over every column plus F1 at each `k` (values of `k` above the
    /// class count are skipped).
    pub fn compute<T: Scalar>(table: &ScoreTable<T>, class_names: &[String], ks: &[usize]) -> Result<Self> {
        if class_names.len() != table.classes() {
            return Err(Error::dim("MetricsReport", (table.classes(), 1), (class_names.len(), 1)));
        }
        let all: Vec<usize> = (0..table.classes()).collect();
        let aps = per_class_ap(table, &all)?;
        let map = mean_of_defined(&aps)?;
        let top_k = ks
            .iter()
            .filter(|&&k| k <= table.classes())
            .map(|&k| f1_at_k(table, k))
            .collect::<Result<_>>()?;
        Ok(Self {
            map,
            per_class: class_names
                .iter()
                .zip(aps)
                .map(|(name, ap)| ClassAp { class: name.clone(), ap })
                .collect(),
            top_k,
            records: table.records(),
            classes: table.classes(),
        })
    }

    pub fn f1(&self, k: usize) -> Option<f64> {
        self.top_k.iter().find(|t| t.k == k).map(|t| t.f1)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Aligned text table with one row per labelled report: mAP then F1 at each k.
pub fn render_table(rows: &[(&str, &MetricsReport)]) -> String {
    let ks: Vec<usize> = rows
        .first()
        .map(|(_, r)| r.top_k.iter().map(|t| t.k).collect())
        .unwrap_or_default();
    let width = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max(5);
    let mut out = format!("{:<width$}  {:>7}", "model", "mAP");
    for k in &ks {
        let _ = write!(out, "  {:>7}", format!("F1 k={k}"));
    }
    out.push('\n');
    for (label, report) in rows {
        let _ = write!(out, "{label:<width$}  {:>7.2}", report.map * 100.0);
        for &k in &ks {
            match report.f1(k) {
                Some(f) => {
                    let _ = write!(out, "  {:>7.2}", f * 100.0);
                }
                None => {
                    let _ = write!(out, "  {:>7}", "-");
                }
            }
        }
        out.push('\n');
    }
    out
}
