//! Evaluation metrics: classification (balanced accuracy, Cohen's kappa, weighted F1,
//! AUROC, AUC-PR) and regression (RMSE, Pearson correlation, coefficient of
//! determination), plus the serialized report.

use crate::{Error, Result};

fn check_paired(a: usize, b: usize, what: &'static str) -> Result<()> {
    if a != b {
        return Err(Error::shape(what, format!("{a} predictions vs {b} labels")));
    }
    if a == 0 {
        return Err(Error::InvalidParameter(format!("{what} needs at least one sample")));
    }
    Ok(())
}

/// Mean per-class recall over the classes present in `labels`.
pub fn balanced_accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    check_paired(preds.len(), labels.len(), "balanced_accuracy")?;
    let k = labels.iter().chain(preds).max().unwrap() + 1;
    let mut support = vec![0usize; k];
    let mut hits = vec![0usize; k];
    for (&p, &y) in preds.iter().zip(labels) {
        support[y] += 1;
        if p == y {
            hits[y] += 1;
        }
    }
    let mut sum = 0.0;
    let mut classes = 0usize;
    for c in 0..k {
        if support[c] > 0 {
            sum += hits[c] as f64 / support[c] as f64;
            classes += 1;
        }
    }
    Ok(sum / classes as f64)
}

/// Chance-corrected agreement: (p_o - p_e) / (1 - p_e) with marginal-product p_e.
pub fn cohens_kappa(preds: &[usize], labels: &[usize]) -> Result<f64> {
    check_paired(preds.len(), labels.len(), "cohens_kappa")?;
    let k = labels.iter().chain(preds).max().unwrap() + 1;
    let n = labels.len() as f64;
    let mut row = vec![0.0; k];
    let mut col = vec![0.0; k];
    let mut agree = 0.0;
    for (&p, &y) in preds.iter().zip(labels) {
        row[y] += 1.0;
        col[p] += 1.0;
        if p == y {
            agree += 1.0;
        }
    }
    let p_o = agree / n;
    let p_e: f64 = row.iter().zip(&col).map(|(r, c)| r * c).sum::<f64>() / (n * n);
    if (1.0 - p_e).abs() < 1e-15 {
        return Ok(if (p_o - 1.0).abs() < 1e-15 { 1.0 } else { 0.0 });
    }
    Ok((p_o - p_e) / (1.0 - p_e))
}

/// Support-weighted mean of per-class F1; a class with zero precision+recall scores 0.
pub fn weighted_f1(preds: &[usize], labels: &[usize]) -> Result<f64> {
    check_paired(preds.len(), labels.len(), "weighted_f1")?;
    let k = labels.iter().chain(preds).max().unwrap() + 1;
    let mut tp = vec![0.0; k];
    let mut fp = vec![0.0; k];
    let mut f_n = vec![0.0; k];
    let mut support = vec![0.0; k];
    for (&p, &y) in preds.iter().zip(labels) {
        support[y] += 1.0;
        if p == y {
            tp[y] += 1.0;
        } else {
            fp[p] += 1.0;
            f_n[y] += 1.0;
        }
    }
    let total: f64 = support.iter().sum();
    let mut out = 0.0;
    for c in 0..k {
        if support[c] == 0.0 {
            continue;
        }
        let denom = 2.0 * tp[c] + fp[c] + f_n[c];
        let f1 = if denom == 0.0 { 0.0 } else { 2.0 * tp[c] / denom };
        out += support[c] / total * f1;
    }
    Ok(out)
}

/// Sorted threshold groups: (positives, negatives) per distinct score, descending.
fn threshold_groups(scores: &[f64], labels: &[usize]) -> Result<Vec<(f64, f64)>> {
    check_paired(scores.len(), labels.len(), "ranked_metric")?;
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidParameter("scores must be finite".into()));
    }
    if labels.iter().any(|&y| y > 1) {
        return Err(Error::InvalidParameter("ranked metrics need binary labels".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));
    let mut groups: Vec<(f64, f64)> = Vec::new();
    let mut i = 0;
    while i < idx.len() {
        let s = scores[idx[i]];
        let mut pos = 0.0;
        let mut neg = 0.0;
        while i < idx.len() && scores[idx[i]] == s {
            if labels[idx[i]] == 1 {
                pos += 1.0;
            } else {
                neg += 1.0;
            }
            i += 1;
        }
        groups.push((pos, neg));
    }
    Ok(groups)
}

/// Trapezoidal area under the ROC curve; tied scores advance TP and FP together.
pub fn auroc(scores: &[f64], labels: &[usize]) -> Result<f64> {
    let groups = threshold_groups(scores, labels)?;
    let p: f64 = groups.iter().map(|g| g.0).sum();
    let n: f64 = groups.iter().map(|g| g.1).sum();
    if p == 0.0 || n == 0.0 {
        return Err(Error::InvalidParameter("AUROC needs both classes present".into()));
    }
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut area = 0.0;
    for (pos, neg) in groups {
        let (tp2, fp2) = (tp + pos, fp + neg);
        area += (fp2 - fp) / n * (tp + tp2) / (2.0 * p);
        tp = tp2;
        fp = fp2;
    }
    Ok(area)
}

/// Area under the precision-recall curve by step-wise interpolation: each recall
/// increment contributes that increment times the precision at its threshold.
pub fn auc_pr(scores: &[f64], labels: &[usize]) -> Result<f64> {
    let groups = threshold_groups(scores, labels)?;
    let p: f64 = groups.iter().map(|g| g.0).sum();
    if p == 0.0 {
        return Err(Error::InvalidParameter("AUC-PR needs at least one positive".into()));
    }
    let mut tp = 0.0;
    let mut predicted = 0.0;
    let mut area = 0.0;
    let mut recall = 0.0;
    for (pos, neg) in groups {
        tp += pos;
        predicted += pos + neg;
        let r = tp / p;
        if r > recall {
            area += (r - recall) * (tp / predicted);
            recall = r;
        }
    }
    Ok(area)
}

/// RMSE, Pearson correlation, and coefficient of determination over flattened
/// row-major `[n, dim]` arrays; each metric is computed per output dimension and
/// averaged uniformly over dimensions.
pub fn regression_metrics(preds: &[f64], targets: &[f64], dim: usize) -> Result<(f64, f64, f64)> {
    if dim == 0 || preds.len() != targets.len() || preds.len() % dim != 0 {
        return Err(Error::shape(
            "regression_metrics",
            format!("{} predictions vs {} targets at width {dim}", preds.len(), targets.len()),
        ));
    }
    let n = preds.len() / dim;
    if n == 0 {
        return Err(Error::InvalidParameter("regression metrics need at least one sample".into()));
    }
    let mut rmse = 0.0;
    let mut pearson = 0.0;
    let mut r2 = 0.0;
    for d in 0..dim {
        let p: Vec<f64> = (0..n).map(|i| preds[i * dim + d]).collect();
        let t: Vec<f64> = (0..n).map(|i| targets[i * dim + d]).collect();
        let mp = p.iter().sum::<f64>() / n as f64;
        let mt = t.iter().sum::<f64>() / n as f64;
        let ss_res: f64 = p.iter().zip(&t).map(|(a, b)| (a - b) * (a - b)).sum();
        let ss_tot: f64 = t.iter().map(|v| (v - mt) * (v - mt)).sum();
        let var_p: f64 = p.iter().map(|v| (v - mp) * (v - mp)).sum();
        let cov: f64 = p.iter().zip(&t).map(|(a, b)| (a - mp) * (b - mt)).sum();
        rmse += (ss_res / n as f64).sqrt();
        pearson += if var_p > 0.0 && ss_tot > 0.0 { cov / (var_p * ss_tot).sqrt() } else { 0.0 };
        r2 += if ss_tot > 0.0 {
            1.0 - ss_res / ss_tot
        } else if ss_res == 0.0 {
            1.0
        } else {
            0.0
        };
    }
    Ok((rmse / dim as f64, pearson / dim as f64, r2 / dim as f64))
}

/// Metrics for one evaluation, keyed by task kind.
#[derive(Clone, Debug, PartialEq)]
pub enum Report {
    Classification {
        balanced_accuracy: f64,
        kappa: f64,
        weighted_f1: f64,
        /// Binary tasks only.
        auroc: Option<f64>,
        /// Binary tasks only.
        auc_pr: Option<f64>,
    },
    Regression {
        rmse: f64,
        pearson: f64,
        r2: f64,
    },
}

impl Report {
    /// Classification report from hard predictions plus, for binary tasks, the
    /// positive-class scores.
    pub fn classification(
        preds: &[usize],
        labels: &[usize],
        scores: Option<&[f64]>,
    ) -> Result<Report> {
        let (auroc_v, auc_pr_v) = match scores {
            Some(s) => (Some(auroc(s, labels)?), Some(auc_pr(s, labels)?)),
            None => (None, None),
        };
        Ok(Report::Classification {
            balanced_accuracy: balanced_accuracy(preds, labels)?,
            kappa: cohens_kappa(preds, labels)?,
            weighted_f1: weighted_f1(preds, labels)?,
            auroc: auroc_v,
            auc_pr: auc_pr_v,
        })
    }

    pub fn regression(preds: &[f64], targets: &[f64], dim: usize) -> Result<Report> {
        let (rmse, pearson, r2) = regression_metrics(preds, targets, dim)?;
        Ok(Report::Regression { rmse, pearson, r2 })
    }

    /// The metric used for model selection: kappa for multi-class, AUROC for binary,
    /// coefficient of determination for regression. Higher is better for all three.
    pub fn monitor(&self) -> f64 {
        match self {
            Report::Classification { auroc: Some(a), .. } => *a,
            Report::Classification { kappa, .. } => *kappa,
            Report::Regression { r2, .. } => *r2,
        }
    }

    /// Named values in a stable order.
    pub fn rows(&self) -> Vec<(&'static str, f64)> {
        match self {
            Report::Classification { balanced_accuracy, kappa, weighted_f1, auroc, auc_pr } => {
                let mut rows = vec![
                    ("balanced_accuracy", *balanced_accuracy),
                    ("cohens_kappa", *kappa),
                    ("weighted_f1", *weighted_f1),
                ];
                if let Some(a) = auroc {
                    rows.push(("auroc", *a));
                }
                if let Some(a) = auc_pr {
                    rows.push(("auc_pr", *a));
                }
                rows
            }
            Report::Regression { rmse, pearson, r2 } => {
                vec![("rmse", *rmse), ("pearson", *pearson), ("r2", *r2)]
            }
        }
    }

    /// Flat `key value` text block.
    pub fn text(&self) -> String {
        self.rows()
            .into_iter()
            .map(|(k, v)| format!("{k} {v:.6}\n"))
            .collect()
    }

    /// One tab-separated line in `rows` order, for machine reading.
    pub fn tsv_line(&self) -> String {
        self.rows()
            .into_iter()
            .map(|(_, v)| format!("{v:.9}"))
            .collect::<Vec<_>>()
            .join("\t")
    }
}
