use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::EvalError;

/// Confusion matrix (rows = truth, columns = prediction) and derived rates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub confusion: Vec<Vec<u64>>,
    pub support: Vec<u64>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    /// Classes whose precision or recall had a zero denominator.
    pub zero_division: Vec<usize>,
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub weighted_precision: f64,
    pub weighted_recall: f64,
    pub weighted_f1: f64,
}

/// Harmonic mean, 0 when both inputs are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Support-weighted mean.
pub fn weighted_mean(values: &[f64], support: &[u64]) -> f64 {
    let total: u64 = support.iter().sum();
    if total == 0 {
        return 0.0;
    }
    values.iter().zip(support).map(|(v, &s)| v * s as f64).sum::<f64>() / total as f64
}

pub fn confusion_and_prf1(y_true: &[usize], y_pred: &[usize], classes: usize) -> Result<ClassificationMetrics, EvalError> {
    if y_true.len() != y_pred.len() {
        return Err(EvalError::LengthMismatch(y_true.len(), y_pred.len()));
    }
    if let Some(&bad) = y_true.iter().chain(y_pred).find(|&&c| c >= classes) {
        return Err(EvalError::InvalidParam(format!("label {bad} outside 0..{classes}")));
    }
    let mut confusion = vec![vec![0u64; classes]; classes];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        confusion[t][p] += 1;
    }
    let support: Vec<u64> = confusion.iter().map(|row| row.iter().sum()).collect();
    let mut precision = vec![0.0; classes];
    let mut recall = vec![0.0; classes];
    let mut zero_division = Vec::new();
    for c in 0..classes {
        let tp = confusion[c][c] as f64;
        let predicted: u64 = confusion.iter().map(|row| row[c]).sum();
        if predicted == 0 || support[c] == 0 {
            zero_division.push(c);
        }
        if predicted > 0 {
            precision[c] = tp / predicted as f64;
        }
        if support[c] > 0 {
            recall[c] = tp / support[c] as f64;
        }
    }
    let f1: Vec<f64> = precision.iter().zip(&recall).map(|(&p, &r)| f1_score(p, r)).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let correct: u64 = (0..classes).map(|c| confusion[c][c]).sum();
    Ok(ClassificationMetrics {
        accuracy: if y_true.is_empty() { 0.0 } else { correct as f64 / y_true.len() as f64 },
        macro_precision: mean(&precision),
        macro_recall: mean(&recall),
        macro_f1: mean(&f1),
        weighted_precision: weighted_mean(&precision, &support),
        weighted_recall: weighted_mean(&recall, &support),
        weighted_f1: weighted_mean(&f1, &support),
        confusion,
        support,
        precision,
        recall,
        f1,
        zero_division,
    })
}

/// Area under the ROC curve via the rank-sum statistic; ties earn half credit.
/// `None` when either class is empty.
pub fn auc_binary(scores: &[f64], positive: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), positive.len());
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // doubled ranks keep tie averages integral
    let mut rank_sum2 = 0u64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg2 = (i + 1 + j + 1) as u64;
        rank_sum2 += avg2 * order[i..=j].iter().filter(|&&k| positive[k]).count() as u64;
        i = j + 1;
    }
    let u2 = rank_sum2 - (n_pos * (n_pos + 1)) as u64;
    Some(u2 as f64 / 2.0 / (n_pos as f64 * n_neg as f64))
}

/// ROC points (fpr, tpr) from (0,0) to (1,1), one per distinct threshold.
pub fn roc_curve(scores: &[f64], positive: &[bool]) -> Vec<(f64, f64)> {
    let n_pos = positive.iter().filter(|&&p| p).count() as f64;
    let n_neg = positive.len() as f64 - n_pos;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut pts = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0.0, 0.0);
    for (i, &k) in order.iter().enumerate() {
        if positive[k] {
            tp += 1.0;
        } else {
            fp += 1.0;
        }
        let last_of_tie = order.get(i + 1).is_none_or(|&n| scores[n] != scores[k]);
        if last_of_tie {
            let fpr = if n_neg > 0.0 { fp / n_neg } else { 0.0 };
            let tpr = if n_pos > 0.0 { tp / n_pos } else { 0.0 };
            pts.push((fpr, tpr));
        }
    }
    pts
}

/// Trapezoidal area under a piecewise-linear curve.
pub fn trapezoid(points: &[(f64, f64)]) -> f64 {
    points.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum()
}

/// One-vs-rest AUC and ROC points for each class.
pub fn roc_auc_ovr(probs: &[Vec<f64>], y_true: &[usize], classes: usize) -> (Vec<Option<f64>>, Vec<Vec<(f64, f64)>>) {
    (0..classes)
        .map(|c| {
            let scores: Vec<f64> = probs.iter().map(|p| p[c]).collect();
            let pos: Vec<bool> = y_true.iter().map(|&t| t == c).collect();
            (auc_binary(&scores, &pos), roc_curve(&scores, &pos))
        })
        .unzip()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionMetrics {
    pub mae: f64,
    pub rmse: f64,
    /// `None` when either series has zero variance.
    pub pearson_r: Option<f64>,
    pub r2: Option<f64>,
}

pub fn regression_metrics(pred: &[f64], truth: &[f64]) -> Result<RegressionMetrics, EvalError> {
    if pred.len() != truth.len() {
        return Err(EvalError::LengthMismatch(pred.len(), truth.len()));
    }
    if pred.len() < 2 {
        return Err(EvalError::InvalidParam("need at least two points".into()));
    }
    let n = pred.len() as f64;
    let mae = pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / n;
    let sse: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum();
    let mp = pred.iter().sum::<f64>() / n;
    let mt = truth.iter().sum::<f64>() / n;
    let sxx: f64 = pred.iter().map(|p| (p - mp) * (p - mp)).sum();
    let syy: f64 = truth.iter().map(|t| (t - mt) * (t - mt)).sum();
    let sxy: f64 = pred.iter().zip(truth).map(|(p, t)| (p - mp) * (t - mt)).sum();
    let pearson_r = (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt());
    let r2 = (syy > 0.0).then(|| 1.0 - sse / syy);
    Ok(RegressionMetrics { mae, rmse: (sse / n).sqrt(), pearson_r, r2 })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlandAltman {
    pub bias: f64,
    pub sd: f64,
    pub loa_low: f64,
    pub loa_high: f64,
    /// (mean of the pair, pred − truth) per point.
    #[serde(skip)]
    pub points: Vec<(f64, f64)>,
}

/// Limits of agreement `bias ± 1.96 sd`.
pub fn limits_of_agreement(bias: f64, sd: f64) -> (f64, f64) {
    (bias - 1.96 * sd, bias + 1.96 * sd)
}

pub fn bland_altman(pred: &[f64], truth: &[f64]) -> Result<BlandAltman, EvalError> {
    if pred.len() != truth.len() {
        return Err(EvalError::LengthMismatch(pred.len(), truth.len()));
    }
    if pred.len() < 2 {
        return Err(EvalError::InvalidParam("need at least two points".into()));
    }
    let points: Vec<(f64, f64)> = pred.iter().zip(truth).map(|(p, t)| ((p + t) / 2.0, p - t)).collect();
    let n = points.len() as f64;
    let bias = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sd = (points.iter().map(|p| (p.1 - bias).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let (loa_low, loa_high) = limits_of_agreement(bias, sd);
    Ok(BlandAltman { bias, sd, loa_low, loa_high, points })
}

/// 95% percentile interval of `stat` over `b` participant-level resamples.
///
/// `stat` receives the resampled indices into the original `n` items.
/// Resample `i` draws from its own ChaCha stream, so results do not depend
/// on evaluation order. Percentiles use the nearest-rank rule.
pub fn bootstrap_ci<F>(n: usize, stat: F, b: usize, seed: u64) -> (f64, f64)
where
    F: Fn(&[usize]) -> f64,
{
    assert!(n > 0 && b > 0, "bootstrap needs data and at least one resample");
    let mut stats: Vec<f64> = (0..b)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            stat(&idx)
        })
        .collect();
    stats.sort_by(f64::total_cmp);
    let rank = |q: f64| ((q * b as f64).ceil() as usize).clamp(1, b) - 1;
    (stats[rank(0.025)], stats[rank(0.975)])
}

pub const DEFAULT_BOOTSTRAP: usize = 1000;

/// mg/dL per mmol/L of glucose.
pub const MGDL_PER_MMOL: f64 = 18.016;

pub fn mgdl_to_mmol(mgdl: f64) -> f64 {
    mgdl / MGDL_PER_MMOL
}

pub fn mmol_to_mgdl(mmol: f64) -> f64 {
    mmol * MGDL_PER_MMOL
}
