//! ROC AUC, sensitivity and specificity for binary scores.

use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

fn check(scores: &[f64], labels: &[usize]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "metrics",
            dim: "samples",
            expected: labels.len(),
            actual: scores.len(),
        });
    }
    if let Some(bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::invalid("metrics", format!("label {bad} is not 0 or 1")));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("scores".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::invalid("metrics", "both classes must be present"));
    }
    Ok((n_pos, n_neg))
}

/// Mann–Whitney AUC from average ranks; tied pairs count one half.
pub fn roc_auc(scores: &[f64], labels: &[usize]) -> Result<f64> {
    let (n_pos, n_neg) = check(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks are 1-based; the tie group i..=j shares their mean.
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += avg_rank * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Empirical ROC points `(fpr, tpr)` from the strictest threshold down,
/// starting at (0, 0) and ending at (1, 1).
pub fn roc_curve(scores: &[f64], labels: &[usize]) -> Result<Vec<(f64, f64)>> {
    let (n_pos, n_neg) = check(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    for (k, &idx) in order.iter().enumerate() {
        if labels[idx] == 1 {
            tp += 1;
        } else {
            fp += 1;
        }
        let last_of_tie = order.get(k + 1).is_none_or(|&next| scores[next] != scores[idx]);
        if last_of_tie {
            points.push((fp as f64 / n_neg as f64, tp as f64 / n_pos as f64));
        }
    }
    Ok(points)
}

/// Trapezoidal area under a piecewise-linear curve.
pub fn trapezoid(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub auc: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub threshold: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub r#fn: usize,
    pub n_pos: usize,
    pub n_neg: usize,
}

/// Confusion counts with death predicted when `score >= threshold`, plus AUC.
pub fn sens_spec(scores: &[f64], labels: &[usize], threshold: f64) -> Result<MetricsReport> {
    let (n_pos, n_neg) = check(scores, labels)?;
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::invalid("sens_spec", format!("threshold {threshold} outside (0, 1)")));
    }
    let (mut tp, mut fp) = (0, 0);
    for (&s, &l) in scores.iter().zip(labels) {
        if s >= threshold {
            if l == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
        }
    }
    Ok(MetricsReport {
        auc: roc_auc(scores, labels)?,
        sensitivity: tp as f64 / n_pos as f64,
        specificity: (n_neg - fp) as f64 / n_neg as f64,
        threshold,
        tp,
        fp,
        tn: n_neg - fp,
        r#fn: n_pos - tp,
        n_pos,
        n_neg,
    })
}

impl MetricsReport {
    /// `key=value` lines in a fixed order.
    pub fn to_key_values(&self) -> String {
        format!(
            "auc={}\nsensitivity={}\nspecificity={}\nthreshold={}\ntp={}\nfp={}\ntn={}\nfn={}\nn_pos={}\nn_neg={}\n",
            self.auc,
            self.sensitivity,
            self.specificity,
            self.threshold,
            self.tp,
            self.fp,
            self.tn,
            self.r#fn,
            self.n_pos,
            self.n_neg
        )
    }

    pub fn write_key_values(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_key_values()).map_err(|e| Error::io(path, e))
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "AUC          {:.4}", self.auc)?;
        writeln!(f, "Sensitivity  {:.1}%  (threshold {})", 100.0 * self.sensitivity, self.threshold)?;
        writeln!(f, "Specificity  {:.1}%", 100.0 * self.specificity)?;
        writeln!(f, "             pred 1  pred 0")?;
        writeln!(f, "label 1      {:>6}  {:>6}", self.tp, self.r#fn)?;
        write!(f, "label 0      {:>6}  {:>6}", self.fp, self.tn)
    }
}

/// ROC points as CSV with header `fpr,tpr`.
pub fn write_roc_csv(path: &Path, points: &[(f64, f64)]) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::from("fpr,tpr\n");
    for (x, y) in points {
        text.push_str(&format!("{x},{y}\n"));
    }
    file.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}
