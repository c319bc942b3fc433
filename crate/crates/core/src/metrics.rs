//! Classification metrics, rank-based AUROC, and correlation statistics.

use serde::Serialize;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricsError {
    #[error("empty input")]
    Empty,
    #[error("length mismatch: {0} predictions vs {1} labels")]
    Length(usize, usize),
    #[error("label {label} out of range for {classes} classes")]
    LabelRange { label: usize, classes: usize },
    #[error("only class {0} present; AUROC needs both classes")]
    SingleClass(usize),
}

type Result<T> = std::result::Result<T, MetricsError>;

/// `counts[truth][predicted]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    pub fn new(predictions: &[usize], labels: &[usize], classes: usize) -> Result<Self> {
        if predictions.is_empty() {
            return Err(MetricsError::Empty);
        }
        if predictions.len() != labels.len() {
            return Err(MetricsError::Length(predictions.len(), labels.len()));
        }
        let mut counts = vec![vec![0; classes]; classes];
        for (&p, &y) in predictions.iter().zip(labels) {
            for v in [p, y] {
                if v >= classes {
                    return Err(MetricsError::LabelRange { label: v, classes });
                }
            }
            counts[y][p] += 1;
        }
        Ok(Self { counts })
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Some per-class precision, recall, or F1 had a zero denominator and
    /// contributed 0.
    pub zero_division: bool,
}

fn ratio(num: usize, den: usize, flag: &mut bool) -> f64 {
    if den == 0 {
        *flag = true;
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Accuracy and macro-averaged precision, recall, and F1.
pub fn classification_metrics(predictions: &[usize], labels: &[usize], classes: usize) -> Result<ClassificationMetrics> {
    let cm = ConfusionMatrix::new(predictions, labels, classes)?;
    let total = cm.total();
    let correct: usize = (0..classes).map(|c| cm.counts[c][c]).sum();
    let mut zero_division = false;
    let (mut p_sum, mut r_sum, mut f_sum) = (0.0, 0.0, 0.0);
    for c in 0..classes {
        let tp = cm.counts[c][c];
        let predicted: usize = (0..classes).map(|y| cm.counts[y][c]).sum();
        let actual: usize = cm.counts[c].iter().sum();
        let p = ratio(tp, predicted, &mut zero_division);
        let r = ratio(tp, actual, &mut zero_division);
        // F1 = 2TP / (2TP + FP + FN), which equals 2PR/(P+R) when defined.
        let f = ratio(2 * tp, predicted + actual, &mut zero_division);
        p_sum += p;
        r_sum += r;
        f_sum += f;
    }
    let k = classes as f64;
    Ok(ClassificationMetrics { accuracy: correct as f64 / total as f64, precision: p_sum / k, recall: r_sum / k, f1: f_sum / k, zero_division })
}

/// Average 1-based ranks with ties sharing their mean rank.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Binary AUROC via the Mann-Whitney statistic with midranks for ties.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.is_empty() {
        return Err(MetricsError::Empty);
    }
    if scores.len() != labels.len() {
        return Err(MetricsError::Length(scores.len(), labels.len()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 {
        return Err(MetricsError::SingleClass(0));
    }
    if n_neg == 0 {
        return Err(MetricsError::SingleClass(1));
    }
    let ranks = midranks(scores);
    let pos_rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    let u = pos_rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

/// One-vs-rest macro AUROC over class probability rows. Classes absent from
/// `labels` (or covering all of them) are skipped.
pub fn macro_auroc(probs: &[Vec<f64>], labels: &[usize], classes: usize) -> Result<f64> {
    let mut sum = 0.0;
    let mut used = 0;
    for c in 0..classes {
        let scores: Vec<f64> = probs.iter().map(|p| p[c]).collect();
        let bin: Vec<bool> = labels.iter().map(|&y| y == c).collect();
        match auroc(&scores, &bin) {
            Ok(a) => {
                sum += a;
                used += 1;
            }
            Err(MetricsError::SingleClass(_)) => {}
            Err(e) => return Err(e),
        }
    }
    if used == 0 {
        return Err(MetricsError::SingleClass(labels.first().copied().unwrap_or(0)));
    }
    Ok(sum / used as f64)
}

/// Pearson correlation, `None` when either side has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len();
    if n < 2 || n != y.len() {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Spearman rank correlation (Pearson on midranks).
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() {
        return None;
    }
    pearson(&midranks(x), &midranks(y))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let y = [0, 1, 2, 1, 0];
        let m = classification_metrics(&y, &y, 3).unwrap();
        assert_eq!((m.accuracy, m.precision, m.recall, m.f1), (1.0, 1.0, 1.0, 1.0));
        assert!(!m.zero_division);
    }

    #[test]
    fn constant_predictor_on_balanced_pair() {
        let m = classification_metrics(&[1, 1, 1, 1], &[0, 0, 1, 1], 2).unwrap();
        assert_eq!(m.accuracy, 0.5);
        assert!((m.f1 - 1.0 / 3.0).abs() < 1e-15);
        assert!(m.zero_division);
    }

    #[test]
    fn metric_errors() {
        assert_eq!(classification_metrics(&[], &[], 2), Err(MetricsError::Empty));
        assert_eq!(classification_metrics(&[0], &[0, 1], 2), Err(MetricsError::Length(1, 2)));
        assert!(matches!(classification_metrics(&[0], &[3], 2), Err(MetricsError::LabelRange { label: 3, .. })));
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap(), 0.75);
        assert_eq!(auroc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.5; 6], &[false, true, false, true, true, false]).unwrap(), 0.5);
        assert_eq!(auroc(&[0.1, 0.2], &[true, true]), Err(MetricsError::SingleClass(1)));
    }

    #[test]
    fn midranks_average_ties() {
        assert_eq!(midranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn correlation_degenerate_is_absent() {
        assert_eq!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), None);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 40.0]), Some(1.0));
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
    }
}
