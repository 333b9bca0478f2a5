//! Per-AU and macro-averaged F1, ROC-AUC and PR-AUC, plus table-style report
//! rendering (values x100, one decimal, per-AU columns and an Avg column).

use std::collections::HashSet;

use crate::error::{Error, Result};

/// Eval-mode predictions with aligned ground truth, one row per image.
#[derive(Debug, Clone)]
pub struct ScoreMatrix {
    pub au_names: Vec<String>,
    /// Row-major `n_rows x n_aus`, each in (0,1).
    pub scores: Vec<f64>,
    /// Binary ground truth, same layout.
    pub labels: Vec<u8>,
    /// Subject id per row, for leakage checks and fold accounting.
    pub subjects: Vec<String>,
}

impl ScoreMatrix {
    pub fn n_rows(&self) -> usize {
        if self.au_names.is_empty() {
            0
        } else {
            self.scores.len() / self.au_names.len()
        }
    }

    pub fn score_column(&self, au: usize) -> Vec<f64> {
        let l = self.au_names.len();
        (0..self.n_rows()).map(|r| self.scores[r * l + au]).collect()
    }

    pub fn label_column(&self, au: usize) -> Vec<u8> {
        let l = self.au_names.len();
        (0..self.n_rows()).map(|r| self.labels[r * l + au]).collect()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub true_pos: u64,
    pub false_pos: u64,
    pub true_neg: u64,
    pub false_neg: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.true_pos + self.false_pos + self.true_neg + self.false_neg
    }

    pub fn add(&mut self, other: &ConfusionCounts) {
        self.true_pos += other.true_pos;
        self.false_pos += other.false_pos;
        self.true_neg += other.true_neg;
        self.false_neg += other.false_neg;
    }
}

/// Threshold one AU's scores at `threshold` (prediction positive when
/// score >= threshold) against binary labels.
pub fn confusion_counts(scores: &[f64], labels: &[u8], threshold: f64) -> Result<ConfusionCounts> {
    if scores.len() != labels.len() {
        return Err(Error::contract(format!(
            "confusion_counts: {} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !(0.0..=1.0).contains(s)) {
        return Err(Error::contract("confusion_counts: scores must lie in [0,1]"));
    }
    let mut c = ConfusionCounts::default();
    for (&s, &l) in scores.iter().zip(labels.iter()) {
        let pred = s >= threshold;
        match (pred, l != 0) {
            (true, true) => c.true_pos += 1,
            (true, false) => c.false_pos += 1,
            (false, false) => c.true_neg += 1,
            (false, true) => c.false_neg += 1,
        }
    }
    Ok(c)
}

/// F1 = 2tp / (2tp + fp + fn); 0 by convention when the denominator is 0.
pub fn f1_score(c: &ConfusionCounts) -> f64 {
    let denom = 2 * c.true_pos + c.false_pos + c.false_neg;
    if denom == 0 {
        0.0
    } else {
        2.0 * c.true_pos as f64 / denom as f64
    }
}

/// ROC-AUC as the Mann-Whitney rank statistic, ties counted half. `None`
/// when labels are single-class (the metric is undefined, not zero).
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let n = scores.len();
    let n_pos = labels.iter().filter(|&&l| l != 0).count();
    let n_neg = n - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("scores must be comparable"));

    // Average ranks over tied groups, then sum positive ranks.
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j + 2) as f64 / 2.0; // ranks are 1-based
        for &idx in &order[i..=j] {
            if labels[idx] != 0 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

/// PR-AUC as average precision: precision at each distinct-score threshold
/// weighted by the recall increment. `None` when there are no positives.
pub fn pr_auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let n = scores.len();
    let n_pos = labels.iter().filter(|&&l| l != 0).count();
    if n_pos == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("scores must be comparable"));

    let mut ap = 0.0f64;
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut prev_recall = 0.0f64;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        for &idx in &order[i..=j] {
            if labels[idx] != 0 {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        let recall = tp as f64 / n_pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j + 1;
    }
    Some(ap)
}

#[derive(Debug, Clone)]
pub struct AuMetrics {
    pub name: String,
    pub f1: f64,
    pub roc_auc: Option<f64>,
    pub pr_auc: Option<f64>,
    pub counts: ConfusionCounts,
}

#[derive(Debug, Clone, Default)]
pub struct Provenance {
    pub fold_ids: Vec<usize>,
    pub config_hash: String,
    pub seed: u64,
}

/// Macro summary of one prediction set.
#[derive(Debug, Clone)]
pub struct MacroSummary {
    pub f1: f64,
    pub roc_auc: Option<f64>,
    pub pr_auc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub au_names: Vec<String>,
    /// Metrics on predictions pooled across folds (the canonical numbers).
    pub per_au: Vec<AuMetrics>,
    pub macro_avg: MacroSummary,
    /// The same macro summary computed within each fold separately.
    pub per_fold: Vec<(usize, MacroSummary)>,
    pub provenance: Provenance,
}

/// Unweighted mean, skipping undefined entries; `None` if all are undefined.
pub fn macro_mean(values: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    let defined: Vec<f64> = values.into_iter().flatten().collect();
    if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    }
}

fn summarize(matrix: &ScoreMatrix, threshold: f64) -> Result<(Vec<AuMetrics>, MacroSummary)> {
    let mut per_au = Vec::with_capacity(matrix.au_names.len());
    for (j, name) in matrix.au_names.iter().enumerate() {
        let scores = matrix.score_column(j);
        let labels = matrix.label_column(j);
        let counts = confusion_counts(&scores, &labels, threshold)?;
        per_au.push(AuMetrics {
            name: name.clone(),
            f1: f1_score(&counts),
            roc_auc: roc_auc(&scores, &labels),
            pr_auc: pr_auc(&scores, &labels),
            counts,
        });
    }
    let macro_avg = MacroSummary {
        f1: per_au.iter().map(|m| m.f1).sum::<f64>() / per_au.len().max(1) as f64,
        roc_auc: macro_mean(per_au.iter().map(|m| m.roc_auc)),
        pr_auc: macro_mean(per_au.iter().map(|m| m.pr_auc)),
    };
    Ok((per_au, macro_avg))
}

/// Pool per-fold predictions (test subjects must be disjoint across folds)
/// and compute per-AU plus macro metrics at threshold 0.5.
pub fn build_report(folds: &[ScoreMatrix], provenance: Provenance) -> Result<MetricsReport> {
    if folds.is_empty() {
        return Err(Error::contract("build_report needs at least one fold"));
    }
    let au_names = folds[0].au_names.clone();
    let mut seen_subjects: HashSet<&str> = HashSet::new();
    for (i, fold) in folds.iter().enumerate() {
        if fold.au_names != au_names {
            return Err(Error::contract(format!("fold {i} has different AU columns")));
        }
        for s in fold.subjects.iter().collect::<HashSet<_>>() {
            if !seen_subjects.insert(s) {
                return Err(Error::contract(format!(
                    "subject {s} appears in test predictions of more than one fold"
                )));
            }
        }
    }

    let pooled = ScoreMatrix {
        au_names: au_names.clone(),
        scores: folds.iter().flat_map(|f| f.scores.iter().copied()).collect(),
        labels: folds.iter().flat_map(|f| f.labels.iter().copied()).collect(),
        subjects: folds.iter().flat_map(|f| f.subjects.iter().cloned()).collect(),
    };
    let (per_au, macro_avg) = summarize(&pooled, 0.5)?;
    let mut per_fold = Vec::new();
    for (i, fold) in folds.iter().enumerate() {
        let (_, summary) = summarize(fold, 0.5)?;
        per_fold.push((provenance.fold_ids.get(i).copied().unwrap_or(i), summary));
    }

    Ok(MetricsReport { au_names, per_au, macro_avg, per_fold, provenance })
}

fn fmt_pct(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{:.1}", v * 100.0),
        None => "-".into(),
    }
}

impl MetricsReport {
    /// Aligned text table: one row per metric, per-AU columns plus Avg.
    pub fn render_table(&self) -> String {
        let mut header = vec!["Metric".to_string()];
        header.extend(self.au_names.iter().cloned());
        header.push("Avg".into());

        let rows = [
            ("F1", self.per_au.iter().map(|m| Some(m.f1)).collect::<Vec<_>>(), Some(self.macro_avg.f1)),
            ("ROC-AUC", self.per_au.iter().map(|m| m.roc_auc).collect(), self.macro_avg.roc_auc),
            ("PR-AUC", self.per_au.iter().map(|m| m.pr_auc).collect(), self.macro_avg.pr_auc),
        ];

        let mut table: Vec<Vec<String>> = vec![header];
        for (name, values, avg) in rows {
            let mut row = vec![name.to_string()];
            row.extend(values.into_iter().map(fmt_pct));
            row.push(fmt_pct(avg));
            table.push(row);
        }

        let widths: Vec<usize> = (0..table[0].len())
            .map(|c| table.iter().map(|r| r[c].len()).max().unwrap_or(0))
            .collect();
        table
            .iter()
            .map(|row| {
                row.iter()
                    .zip(widths.iter())
                    .map(|(cell, w)| format!("{cell:>w$}"))
                    .collect::<Vec<_>>()
                    .join("  ")
            })
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// CSV serialization with provenance in `#` comment lines.
    pub fn render_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("# config_hash={}\n", self.provenance.config_hash));
        out.push_str(&format!("# seed={}\n", self.provenance.seed));
        out.push_str(&format!(
            "# folds={}\n",
            self.provenance.fold_ids.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
        ));
        out.push_str("scope,metric,");
        out.push_str(&self.au_names.join(","));
        out.push_str(",avg\n");

        let mut row = |scope: &str, metric: &str, values: Vec<Option<f64>>, avg: Option<f64>| {
            out.push_str(scope);
            out.push(',');
            out.push_str(metric);
            for v in values {
                out.push(',');
                out.push_str(&fmt_pct(v));
            }
            out.push(',');
            out.push_str(&fmt_pct(avg));
            out.push('\n');
        };

        row("pooled", "f1", self.per_au.iter().map(|m| Some(m.f1)).collect(), Some(self.macro_avg.f1));
        row("pooled", "roc_auc", self.per_au.iter().map(|m| m.roc_auc).collect(), self.macro_avg.roc_auc);
        row("pooled", "pr_auc", self.per_au.iter().map(|m| m.pr_auc).collect(), self.macro_avg.pr_auc);
        for (fold, summary) in &self.per_fold {
            row(
                &format!("fold{fold}"),
                "macro",
                vec![Some(summary.f1), summary.roc_auc, summary.pr_auc],
                None,
            );
        }
        out
    }
}
