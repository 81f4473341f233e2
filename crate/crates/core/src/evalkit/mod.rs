//! Grouped cross-validation splits, classification/regression/agreement
//! metrics, bootstrap intervals and the serialized run report.

mod folds;
mod metrics;
mod report;

pub use folds::{group_kfold, FoldAssignment, FoldRoles};
pub use metrics::{
    auc_binary, bland_altman, bootstrap_ci, confusion_and_prf1, f1_score, limits_of_agreement, mgdl_to_mmol,
    mmol_to_mgdl, regression_metrics, roc_auc_ovr, roc_curve, trapezoid, weighted_mean, BlandAltman,
    ClassificationMetrics, RegressionMetrics, DEFAULT_BOOTSTRAP, MGDL_PER_MMOL,
};
pub use report::{to_canonical_json, FoldSummary, Interval, MetricsReport, ParticipantPrediction, CLASSES};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("participant {id} appears in two roles of fold {fold}")]
    Overlap { fold: usize, id: String },
}
