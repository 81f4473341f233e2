//! Files written by `train-eval` and `ablate`.

use std::fmt::Write as _;
use std::path::Path;

use sclera_core::evalkit::{mgdl_to_mmol, roc_auc_ovr, FoldAssignment, MetricsReport, ParticipantPrediction, CLASSES};
use sclera_core::fsutil::write_atomic;
use sclera_core::model::{history_csv, CvOutput};
use sclera_core::synthcohort::ClassLabel;

use crate::svg::{bar_chart, range, table, Plot, PALETTE};
use crate::CliError;

fn put(dir: &Path, name: &str, content: &str) -> Result<(), CliError> {
    write_atomic(&dir.join(name), content.as_bytes()).map_err(|e| CliError::Io(format!("{name}: {e}")))
}

fn class_name(c: usize) -> &'static str {
    ClassLabel::from_index(c).map_or("?", ClassLabel::as_str)
}

pub fn predictions_csv(preds: &[ParticipantPrediction]) -> String {
    let mut s = String::from("participant_id,fold,true_class,pred_class,p_normal,p_controlled,p_high_glucose,fpg_true_mgdl,fpg_pred_mgdl\n");
    for p in preds {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            p.id,
            p.fold,
            class_name(p.true_class),
            class_name(p.pred_class),
            p.probs[0],
            p.probs[1],
            p.probs[2],
            p.fpg_true,
            p.fpg_pred
        );
    }
    s
}

pub fn folds_csv(folds: &FoldAssignment) -> String {
    let mut s = String::from("participant_id,fold\n");
    for id in folds.participants() {
        let _ = writeln!(s, "{id},{}", folds.group_of(id).expect("listed participant"));
    }
    s
}

/// Reads `participant_id,fold` rows back.
pub fn read_folds_csv(path: &Path) -> Result<Vec<(String, usize)>, CliError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    rdr.records()
        .map(|r| {
            let r = r.map_err(|e| CliError::Io(e.to_string()))?;
            let fold = r[1].parse().map_err(|_| CliError::Io(format!("bad fold {:?}", &r[1])))?;
            Ok((r[0].to_string(), fold))
        })
        .collect()
}

fn roc_outputs(report: &MetricsReport, preds: &[ParticipantPrediction]) -> (String, String) {
    let probs: Vec<Vec<f64>> = preds.iter().map(|p| p.probs.clone()).collect();
    let y: Vec<usize> = preds.iter().map(|p| p.true_class).collect();
    let (_, curves) = roc_auc_ovr(&probs, &y, CLASSES);
    let mut csv = String::from("class,fpr,tpr\n");
    let mut plot = Plot::new("ROC (one vs rest)", "false positive rate", "true positive rate", (0.0, 1.0), (0.0, 1.0));
    plot.polyline(&[(0.0, 0.0), (1.0, 1.0)], "#999", true);
    let mut legend = Vec::new();
    let labels: Vec<String> = (0..CLASSES)
        .map(|c| match report.auc_ovr[c] {
            Some(a) => format!("{} AUC {a:.3}", class_name(c)),
            None => format!("{} AUC n/a", class_name(c)),
        })
        .collect();
    for (c, curve) in curves.iter().enumerate() {
        for (f, t) in curve {
            let _ = writeln!(csv, "{},{f},{t}", class_name(c));
        }
        plot.polyline(curve, PALETTE[c], false);
        legend.push((labels[c].as_str(), PALETTE[c]));
    }
    plot.legend(&legend);
    (csv, plot.finish())
}

fn scatter_svg(report: &MetricsReport, preds: &[ParticipantPrediction]) -> String {
    let pts: Vec<(f64, f64)> = preds.iter().map(|p| (p.fpg_true, p.fpg_pred)).collect();
    let r = range(pts.iter().flat_map(|&(a, b)| [a, b]));
    let title = match report.regression.pearson_r {
        Some(rv) => format!("Predicted vs reference FPG (r = {rv:.3})"),
        None => "Predicted vs reference FPG".to_string(),
    };
    let mut plot = Plot::new(&title, "reference FPG (mg/dL)", "predicted FPG (mg/dL)", r, r);
    plot.polyline(&[(r.0, r.0), (r.1, r.1)], "#999", true);
    plot.points(&pts, PALETTE[0]);
    plot.finish()
}

fn bland_altman_outputs(report: &MetricsReport) -> (String, String) {
    let ba = &report.bland_altman;
    let mut csv = String::from("mean_mgdl,difference_mgdl\n");
    for (m, d) in &ba.points {
        let _ = writeln!(csv, "{m},{d}");
    }
    let xr = range(ba.points.iter().map(|p| p.0));
    let yr = range(ba.points.iter().map(|p| p.1).chain([ba.loa_low, ba.loa_high]));
    let mut plot = Plot::new("Bland-Altman", "mean of predicted and reference (mg/dL)", "predicted - reference (mg/dL)", xr, yr);
    plot.points(&ba.points, PALETTE[0]);
    plot.hline(ba.bias, PALETTE[1], &format!("bias {:.2}", ba.bias));
    plot.hline(ba.loa_low, "#555", &format!("-1.96 SD {:.2}", ba.loa_low));
    plot.hline(ba.loa_high, "#555", &format!("+1.96 SD {:.2}", ba.loa_high));
    (csv, plot.finish())
}

/// Per-fold rows then a `mean ± SD` row.
pub fn fold_table_rows(report: &MetricsReport) -> Vec<Vec<String>> {
    let mut rows: Vec<Vec<String>> = report
        .fold_breakdown
        .iter()
        .map(|f| {
            vec![
                (f.fold + 1).to_string(),
                f.n.to_string(),
                format!("{:.4}", f.accuracy),
                format!("{:.4}", f.macro_f1),
                format!("{:.2}", f.mae_mgdl),
            ]
        })
        .collect();
    let stat = |v: Vec<f64>| {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        let sd = if v.len() > 1 { (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
        (m, sd)
    };
    let (f1m, f1s) = stat(report.fold_breakdown.iter().map(|f| f.macro_f1).collect());
    let (mm, ms) = stat(report.fold_breakdown.iter().map(|f| f.mae_mgdl).collect());
    rows.push(vec![
        "mean ± SD".into(),
        String::new(),
        format!("{:.4} ± {:.4}", report.fold_accuracy_mean, report.fold_accuracy_sd),
        format!("{f1m:.4} ± {f1s:.4}"),
        format!("{mm:.2} ± {ms:.2}"),
    ]);
    rows
}

const FOLD_HEADER: [&str; 5] = ["fold", "n", "accuracy", "macro_f1", "mae_mgdl"];

/// Everything `train-eval` writes besides the preprocessed inputs.
pub fn write_run(out: &Path, folds: &FoldAssignment, cv: &CvOutput, report: &MetricsReport, seed: u64) -> Result<(), CliError> {
    for sub in ["models", "history"] {
        std::fs::create_dir_all(out.join(sub))?;
    }
    put(out, "report.json", &report.to_canonical_json())?;
    put(out, "predictions.csv", &predictions_csv(&cv.predictions))?;
    put(out, "folds.csv", &folds_csv(folds))?;
    for (i, (model, history)) in cv.models.iter().zip(&cv.histories).enumerate() {
        model.save(&out.join("models"), &format!("fold{i}"))?;
        if let Some(mask) = &model.mask {
            put(&out.join("models"), &format!("fold{i}.mask"), &mask.to_text(seed))?;
        }
        put(&out.join("history"), &format!("fold{i}.csv"), &history_csv(history))?;
    }
    let (roc_csv, roc_svg) = roc_outputs(report, &cv.predictions);
    put(out, "roc.csv", &roc_csv)?;
    put(out, "roc.svg", &roc_svg)?;
    put(out, "scatter.svg", &scatter_svg(report, &cv.predictions))?;
    let (ba_csv, ba_svg) = bland_altman_outputs(report);
    put(out, "bland_altman.csv", &ba_csv)?;
    put(out, "bland_altman.svg", &ba_svg)?;
    let rows = fold_table_rows(report);
    let mut csv = FOLD_HEADER.join(",") + "\n";
    for r in &rows {
        csv.push_str(&r.join(","));
        csv.push('\n');
    }
    put(out, "fold_table.csv", &csv)?;
    put(out, "fold_table.svg", &table("Per-fold results", &FOLD_HEADER, &rows))?;
    Ok(())
}

/// `variant,mae_mgdl,mae_mmol,accuracy,pearson_r` in variant order.
pub fn ablation_csv(reports: &[MetricsReport]) -> String {
    let mut s = String::from("variant,mae_mgdl,mae_mmol,accuracy,pearson_r\n");
    for r in reports {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.variant,
            r.regression.mae,
            mgdl_to_mmol(r.regression.mae),
            r.classification.accuracy,
            r.regression.pearson_r.map_or(String::new(), |v| v.to_string())
        );
    }
    s
}

pub fn write_ablation(out: &Path, reports: &[MetricsReport], outputs: &[CvOutput]) -> Result<(), CliError> {
    let dir = out.join("reports");
    std::fs::create_dir_all(&dir)?;
    for (r, o) in reports.iter().zip(outputs) {
        put(&dir, &format!("{}.json", r.variant), &r.to_canonical_json())?;
        put(&dir, &format!("{}_predictions.csv", r.variant), &predictions_csv(&o.predictions))?;
    }
    put(out, "ablation.csv", &ablation_csv(reports))?;
    let bars: Vec<(String, f64)> = reports.iter().map(|r| (r.variant.clone(), mgdl_to_mmol(r.regression.mae))).collect();
    put(out, "ablation.svg", &bar_chart("Ablation: glucose MAE", "MAE (mmol/L)", &bars))?;
    Ok(())
}
