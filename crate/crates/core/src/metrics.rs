//! Calibration, proper-scoring and OOD-ranking metrics.
//!
//! ECE uses `M` equal-width bins on the max-probability confidence; a
//! confidence of exactly 1 falls in the last bin. AUROC is the Mann–Whitney
//! statistic with half credit for ties. AUPR treats OOD as the positive class
//! (higher score = more OOD) and integrates precision over recall steps,
//! processing tied scores as one threshold.

use std::fmt::Write as _;

use crate::error::{check_dim, Error, Result};
use crate::linalg::Matrix;

pub const DEFAULT_ECE_BINS: usize = 15;
const NLL_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    /// `N × K`, rows on the simplex.
    pub probs: Matrix,
    pub labels: Vec<usize>,
    pub ood_flags: Option<Vec<bool>>,
    pub uncertainty_scores: Option<Vec<f64>>,
}

impl PredictionSet {
    pub fn new(probs: Matrix, labels: Vec<usize>) -> Result<Self> {
        check_dim("PredictionSet labels", probs.rows(), labels.len())?;
        for (i, (row, &y)) in probs.row_iter().zip(&labels).enumerate() {
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 || row.iter().any(|&p| p < -1e-12) {
                return Err(Error::InvalidArgument(format!(
                    "row {i} is not on the simplex (sum {sum})"
                )));
            }
            if y >= probs.cols() {
                return Err(Error::InvalidArgument(format!("label {y} out of range at row {i}")));
            }
        }
        Ok(Self {
            probs,
            labels,
            ood_flags: None,
            uncertainty_scores: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Argmax and its probability for row `i` (first index wins ties).
    fn top(&self, i: usize) -> (usize, f64) {
        self.probs
            .row(i)
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (k, p)| if p > best.1 { (k, p) } else { best })
    }
}

pub fn accuracy(preds: &PredictionSet) -> f64 {
    if preds.is_empty() {
        return 0.0;
    }
    let correct = (0..preds.len())
        .filter(|&i| preds.top(i).0 == preds.labels[i])
        .count();
    correct as f64 / preds.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub accuracy: f64,
    pub confidence: f64,
}

/// Per-bin reliability table for `num_bins` equal-width bins.
pub fn reliability_bins(preds: &PredictionSet, num_bins: usize) -> Result<Vec<CalibrationBin>> {
    if num_bins == 0 {
        return Err(Error::InvalidArgument("num_bins must be at least 1".into()));
    }
    let mut count = vec![0usize; num_bins];
    let mut correct = vec![0.0; num_bins];
    let mut conf = vec![0.0; num_bins];
    for i in 0..preds.len() {
        let (k, p) = preds.top(i);
        let b = ((p * num_bins as f64).ceil() as usize).clamp(1, num_bins) - 1;
        count[b] += 1;
        conf[b] += p;
        if k == preds.labels[i] {
            correct[b] += 1.0;
        }
    }
    Ok((0..num_bins)
        .map(|b| {
            let n = count[b] as f64;
            CalibrationBin {
                lower: b as f64 / num_bins as f64,
                upper: (b + 1) as f64 / num_bins as f64,
                count: count[b],
                accuracy: if count[b] > 0 { correct[b] / n } else { 0.0 },
                confidence: if count[b] > 0 { conf[b] / n } else { 0.0 },
            }
        })
        .collect())
}

/// `Σ_m |B_m|/n · |acc(B_m) − conf(B_m)|`.
pub fn ece(preds: &PredictionSet, num_bins: usize) -> Result<f64> {
    let bins = reliability_bins(preds, num_bins)?;
    if preds.is_empty() {
        return Ok(0.0);
    }
    let n = preds.len() as f64;
    Ok(bins
        .iter()
        .map(|b| b.count as f64 / n * (b.accuracy - b.confidence).abs())
        .sum())
}

/// Mean `−log p(y)`, probabilities floored at `1e-12`.
pub fn nll(preds: &PredictionSet) -> f64 {
    if preds.is_empty() {
        return 0.0;
    }
    let total: f64 = (0..preds.len())
        .map(|i| -preds.probs[(i, preds.labels[i])].max(NLL_FLOOR).ln())
        .sum();
    total / preds.len() as f64
}

/// Mean `Σ_k (p_k − 1{y = k})²`.
pub fn brier(preds: &PredictionSet) -> f64 {
    if preds.is_empty() {
        return 0.0;
    }
    let total: f64 = (0..preds.len())
        .map(|i| {
            preds
                .probs
                .row(i)
                .iter()
                .enumerate()
                .map(|(k, &p)| {
                    let t = if k == preds.labels[i] { 1.0 } else { 0.0 };
                    (p - t) * (p - t)
                })
                .sum::<f64>()
        })
        .sum();
    total / preds.len() as f64
}

fn check_binary(scores: &[f64], positives: &[bool]) -> Result<(usize, usize)> {
    check_dim("ood scores", scores.len(), positives.len())?;
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidArgument("scores contain NaN".into()));
    }
    let n_pos = positives.iter().filter(|&&p| p).count();
    let n_neg = positives.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::InvalidArgument(
            "need at least one positive and one negative example".into(),
        ));
    }
    Ok((n_pos, n_neg))
}

/// Indices sorted by score, descending; stable so tie groups are contiguous.
fn order_desc(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

/// Area under the ROC curve via average ranks (ties get half credit).
pub fn auroc(scores: &[f64], positives: &[bool]) -> Result<f64> {
    let (n_pos, n_neg) = check_binary(scores, positives)?;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // 1-based average rank of the tie group
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &t in &idx[i..=j] {
            if positives[t] {
                rank_sum_pos += avg;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Area under the precision–recall curve (step integration, average precision).
pub fn aupr(scores: &[f64], positives: &[bool]) -> Result<f64> {
    let (n_pos, _) = check_binary(scores, positives)?;
    let idx = order_desc(scores);
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut area = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        for &t in &idx[i..=j] {
            if positives[t] {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        let recall = tp as f64 / n_pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j + 1;
    }
    Ok(area)
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &t in &idx[i..=j] {
            ranks[t] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation (Pearson correlation of average ranks).
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    check_dim("spearman", a.len(), b.len())?;
    if a.iter().chain(b).any(|v| v.is_nan()) {
        return Err(Error::InvalidArgument("spearman input contains NaN".into()));
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::InvalidArgument(
            "spearman correlation is undefined for constant input".into(),
        ));
    }
    Ok(cov / (va * vb).sqrt())
}

/// `K / (K + Σ_k exp(z_k))`.
pub fn dempster_shafer(logits: &[f64]) -> f64 {
    let k = logits.len() as f64;
    let mass: f64 = logits.iter().map(|z| z.exp()).sum();
    k / (k + mass)
}

/// Flat metric report, printable as `key=value` lines or one CSV row.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsReport {
    pub entries: Vec<(String, String)>,
}

impl MetricsReport {
    pub fn push(&mut self, key: impl Into<String>, value: impl ToString) {
        self.entries.push((key.into(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn to_key_value(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }

    pub fn csv_header(&self) -> String {
        self.entries
            .iter()
            .map(|(k, _)| k.as_str())
            .collect::<Vec<_>>()
            .join(",")
    }

    pub fn csv_row(&self) -> String {
        self.entries
            .iter()
            .map(|(_, v)| v.as_str())
            .collect::<Vec<_>>()
            .join(",")
    }
}

/// Accuracy / ECE / NLL / Brier plus, when OOD scores are available, AUROC
/// and AUPR.
pub fn evaluate(
    preds: &PredictionSet,
    ood: Option<(&[f64], &[bool])>,
    num_bins: usize,
) -> Result<MetricsReport> {
    let mut report = MetricsReport::default();
    report.push("n", preds.len());
    report.push("accuracy", accuracy(preds));
    report.push("ece", ece(preds, num_bins)?);
    report.push("nll", nll(preds));
    report.push("brier", brier(preds));
    if let Some((scores, flags)) = ood {
        report.push("auroc", auroc(scores, flags)?);
        report.push("aupr", aupr(scores, flags)?);
    }
    Ok(report)
}
