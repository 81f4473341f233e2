use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{
    bland_altman, bootstrap_ci, confusion_and_prf1, mgdl_to_mmol, regression_metrics, roc_auc_ovr, BlandAltman,
    ClassificationMetrics, EvalError, RegressionMetrics,
};

pub const CLASSES: usize = 3;

/// One participant's out-of-fold prediction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParticipantPrediction {
    pub id: String,
    pub fold: usize,
    pub true_class: usize,
    pub pred_class: usize,
    pub probs: Vec<f64>,
    pub fpg_true: f64,
    pub fpg_pred: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl From<(f64, f64)> for Interval {
    fn from((lo, hi): (f64, f64)) -> Self {
        Self { lo, hi }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub fold: usize,
    pub n: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub mae_mgdl: f64,
}

/// All statistics of one evaluation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub variant: String,
    pub n_participants: usize,
    pub fold_digest: String,
    pub bootstrap_resamples: usize,
    pub classification: ClassificationMetrics,
    pub accuracy_ci: Interval,
    pub macro_f1_ci: Interval,
    pub precision_ci: Vec<Interval>,
    pub recall_ci: Vec<Interval>,
    pub f1_ci: Vec<Interval>,
    pub auc_ovr: Vec<Option<f64>>,
    pub regression: RegressionMetrics,
    pub mae_ci: Interval,
    pub rmse_ci: Interval,
    pub mae_mmol: f64,
    pub rmse_mmol: f64,
    pub bland_altman: BlandAltman,
    pub fold_breakdown: Vec<FoldSummary>,
    pub fold_accuracy_mean: f64,
    pub fold_accuracy_sd: f64,
}

impl MetricsReport {
    pub fn build(
        variant: &str,
        preds: &[ParticipantPrediction],
        fold_digest: &str,
        resamples: usize,
        seed: u64,
    ) -> Result<Self, EvalError> {
        let y_true: Vec<usize> = preds.iter().map(|p| p.true_class).collect();
        let y_pred: Vec<usize> = preds.iter().map(|p| p.pred_class).collect();
        let truth: Vec<f64> = preds.iter().map(|p| p.fpg_true).collect();
        let est: Vec<f64> = preds.iter().map(|p| p.fpg_pred).collect();
        let classification = confusion_and_prf1(&y_true, &y_pred, CLASSES)?;
        let probs: Vec<Vec<f64>> = preds.iter().map(|p| p.probs.clone()).collect();
        let (auc_ovr, _) = roc_auc_ovr(&probs, &y_true, CLASSES);
        let regression = regression_metrics(&est, &truth)?;
        let bland_altman = bland_altman(&est, &truth)?;

        let pick = |idx: &[usize]| -> (Vec<usize>, Vec<usize>) {
            (idx.iter().map(|&i| y_true[i]).collect(), idx.iter().map(|&i| y_pred[i]).collect())
        };
        let class_stat = |f: fn(&ClassificationMetrics) -> f64| {
            move |idx: &[usize]| {
                let (t, p) = pick(idx);
                f(&confusion_and_prf1(&t, &p, CLASSES).expect("labels validated"))
            }
        };
        let n = preds.len();
        let ci = |stat: &dyn Fn(&[usize]) -> f64| Interval::from(bootstrap_ci(n, stat, resamples, seed));
        let per_class = |which: usize| -> Vec<Interval> {
            (0..CLASSES)
                .map(|c| {
                    ci(
                        &|idx: &[usize]| {
                            let (t, p) = pick(idx);
                            let m = confusion_and_prf1(&t, &p, CLASSES).expect("labels validated");
                            [&m.precision, &m.recall, &m.f1][which][c]
                        },
                    )
                })
                .collect()
        };
        let abs_err = |idx: &[usize]| idx.iter().map(|&i| (est[i] - truth[i]).abs()).sum::<f64>() / idx.len() as f64;
        let sq_err =
            |idx: &[usize]| (idx.iter().map(|&i| (est[i] - truth[i]).powi(2)).sum::<f64>() / idx.len() as f64).sqrt();

        let folds: Vec<usize> = {
            let mut f: Vec<usize> = preds.iter().map(|p| p.fold).collect();
            f.sort_unstable();
            f.dedup();
            f
        };
        let fold_breakdown: Vec<FoldSummary> = folds
            .iter()
            .map(|&fold| {
                let idx: Vec<usize> = (0..n).filter(|&i| preds[i].fold == fold).collect();
                let (t, p) = pick(&idx);
                let m = confusion_and_prf1(&t, &p, CLASSES).expect("labels validated");
                FoldSummary { fold, n: idx.len(), accuracy: m.accuracy, macro_f1: m.macro_f1, mae_mgdl: abs_err(&idx) }
            })
            .collect();
        let accs: Vec<f64> = fold_breakdown.iter().map(|f| f.accuracy).collect();
        let fold_accuracy_mean = accs.iter().sum::<f64>() / accs.len().max(1) as f64;
        let fold_accuracy_sd = if accs.len() > 1 {
            (accs.iter().map(|a| (a - fold_accuracy_mean).powi(2)).sum::<f64>() / (accs.len() - 1) as f64).sqrt()
        } else {
            0.0
        };

        Ok(Self {
            variant: variant.to_string(),
            n_participants: n,
            fold_digest: fold_digest.to_string(),
            bootstrap_resamples: resamples,
            accuracy_ci: ci(&class_stat(|m| m.accuracy)),
            macro_f1_ci: ci(&class_stat(|m| m.macro_f1)),
            precision_ci: per_class(0),
            recall_ci: per_class(1),
            f1_ci: per_class(2),
            auc_ovr,
            mae_ci: ci(&abs_err),
            rmse_ci: ci(&sq_err),
            mae_mmol: mgdl_to_mmol(regression.mae),
            rmse_mmol: mgdl_to_mmol(regression.rmse),
            regression,
            classification,
            bland_altman,
            fold_breakdown,
            fold_accuracy_mean,
            fold_accuracy_sd,
        })
    }

    pub fn to_canonical_json(&self) -> String {
        to_canonical_json(self)
    }
}

/// JSON with sorted object keys, reals written with 17 significant digits,
/// and non-finite or missing numbers as `null`.
pub fn to_canonical_json<T: Serialize>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("report types serialize");
    let mut out = String::new();
    write_value(&v, 0, &mut out);
    out.push('\n');
    out
}

fn write_value(v: &Value, depth: usize, out: &mut String) {
    let pad = |d: usize| "  ".repeat(d);
    match v {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                out.push_str(&i.to_string());
            } else if let Some(u) = n.as_u64() {
                out.push_str(&u.to_string());
            } else {
                match n.as_f64() {
                    Some(f) if f.is_finite() => out.push_str(&format!("{f:.16e}")),
                    _ => out.push_str("null"),
                }
            }
        }
        Value::String(s) => out.push_str(&serde_json::to_string(s).expect("string")),
        Value::Array(items) => {
            if items.is_empty() {
                out.push_str("[]");
                return;
            }
            out.push_str("[\n");
            for (i, item) in items.iter().enumerate() {
                out.push_str(&pad(depth + 1));
                write_value(item, depth + 1, out);
                out.push_str(if i + 1 < items.len() { ",\n" } else { "\n" });
            }
            out.push_str(&pad(depth));
            out.push(']');
        }
        Value::Object(map) => {
            if map.is_empty() {
                out.push_str("{}");
                return;
            }
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push_str("{\n");
            for (i, k) in keys.iter().enumerate() {
                out.push_str(&pad(depth + 1));
                out.push_str(&serde_json::to_string(k).expect("key"));
                out.push_str(": ");
                write_value(&map[*k], depth + 1, out);
                out.push_str(if i + 1 < keys.len() { ",\n" } else { "\n" });
            }
            out.push_str(&pad(depth));
            out.push('}');
        }
    }
}
