use super::{forward, predict, train_fold, Dataset, EpochRecord, ModelConfig, ModelError, TrainHyper, TrainedModel, Variant};
use crate::autonn::Graph;
use crate::evalkit::{FoldAssignment, MetricsReport, ParticipantPrediction};
use crate::mrfo::{feature_select, FeatureMask, MrfoConfig, DEFAULT_LAMBDA_RED};
use crate::synthcohort::CohortManifest;

/// Search budget of the per-fold feature selection.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SelectionBudget {
    pub pop_size: usize,
    pub iters: usize,
    pub lambda_red: f64,
}

impl Default for SelectionBudget {
    fn default() -> Self {
        Self { pop_size: 20, iters: 50, lambda_red: DEFAULT_LAMBDA_RED }
    }
}

#[derive(Clone, Debug)]
pub struct CvOutput {
    pub variant: Variant,
    /// Out-of-fold predictions sorted by participant id.
    pub predictions: Vec<ParticipantPrediction>,
    pub models: Vec<TrainedModel>,
    pub histories: Vec<Vec<EpochRecord>>,
}

fn fold_seed(seed: u64, fold: usize) -> u64 {
    seed.wrapping_add((fold as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03))
}

fn embeddings(
    model: &TrainedModel,
    data: &Dataset,
    ids: &[String],
    forbidden: &[String],
) -> Result<Vec<Vec<f64>>, ModelError> {
    let source = data.guarded(forbidden.iter().map(String::as_str));
    let mut out = Vec::with_capacity(ids.len());
    for chunk in ids.chunks(32) {
        let inputs = chunk.iter().map(|id| source.fetch(id)).collect::<Result<Vec<_>, _>>()?;
        let mut g = Graph::new();
        let nodes = forward(&mut g, &model.params, &model.config, &inputs, None)?;
        let e = g.value(nodes.embedding);
        let w = e.shape()[1];
        out.extend(e.data().chunks(w).map(<[f64]>::to_vec));
    }
    Ok(out)
}

fn labels(manifest: &CohortManifest, ids: &[String]) -> Result<Vec<usize>, ModelError> {
    ids.iter()
        .map(|id| {
            manifest.get(id).map(|r| r.class_label.index()).ok_or_else(|| ModelError::UnknownParticipant(id.clone()))
        })
        .collect()
}

/// Trains one fold, including the selection stage for masked variants:
/// half the epochs without a mask, selection on frozen embeddings of the
/// fold's train (probe fit) and validation (probe score) participants, then
/// the remaining epochs with the mask applied.
fn train_one(
    data: &Dataset,
    manifest: &CohortManifest,
    folds: &FoldAssignment,
    fold: usize,
    config: &ModelConfig,
    hyper: &TrainHyper,
    budget: &SelectionBudget,
    seed: u64,
) -> Result<(TrainedModel, Vec<EpochRecord>), ModelError> {
    if !config.variant.selects_features() {
        let out = train_fold(data, manifest, folds, fold, config, hyper, seed, None, None)?;
        return Ok((out.model, out.history));
    }
    let roles = folds.roles(fold);
    if roles.val.is_empty() {
        return Err(ModelError::InvalidConfig(format!("fold {fold}: feature selection needs validation participants")));
    }
    let first = TrainHyper { epochs: hyper.epochs / 2, ..*hyper };
    let warm = train_fold(data, manifest, folds, fold, config, &first, seed, None, None)?;

    let train_x = embeddings(&warm.model, data, &roles.train, &roles.test)?;
    let val_x = embeddings(&warm.model, data, &roles.val, &roles.test)?;
    let mrfo = MrfoConfig::uniform(config.mask_len(), 0.0, 1.0, budget.pop_size, budget.iters, seed);
    let train_y = labels(manifest, &roles.train)?;
    let val_y = labels(manifest, &roles.val)?;
    let selection = feature_select(&train_x, &train_y, &val_x, &val_y, super::CLASSES, &mrfo, budget.lambda_red)?;
    log::info!(
        "fold {fold}: kept {} of {} embedding features (fitness {:.4})",
        selection.mask.count(),
        selection.mask.len(),
        selection.fitness
    );

    let second = TrainHyper { epochs: hyper.epochs - first.epochs, ..*hyper };
    let tuned = train_fold(
        data,
        manifest,
        folds,
        fold,
        config,
        &second,
        seed,
        Some(&selection.mask),
        Some(warm.model.params),
    )?;
    let mut history = warm.history;
    history.extend(tuned.history.into_iter().map(|r| EpochRecord { epoch: r.epoch + first.epochs, ..r }));
    Ok((tuned.model, history))
}

/// Grouped cross-validation of one variant; every participant is predicted
/// by the model of the fold that held it out.
pub fn cross_validate(
    data: &Dataset,
    manifest: &CohortManifest,
    folds: &FoldAssignment,
    config: &ModelConfig,
    hyper: &TrainHyper,
    budget: &SelectionBudget,
    seed: u64,
) -> Result<CvOutput, ModelError> {
    folds.validate().map_err(|e| match e {
        crate::evalkit::EvalError::Overlap { id, .. } => ModelError::LeakageDetected { id },
        other => other.into(),
    })?;
    let mut predictions = Vec::new();
    let mut models = Vec::with_capacity(folds.k());
    let mut histories = Vec::with_capacity(folds.k());
    for fold in 0..folds.k() {
        let (model, history) = train_one(data, manifest, folds, fold, config, hyper, budget, fold_seed(seed, fold))?;
        let test = &folds.roles(fold).test;
        let inputs = test.iter().map(|id| data.get(id)).collect::<Result<Vec<_>, _>>()?;
        for (id, p) in test.iter().zip(predict(&model, &inputs)?) {
            let rec = manifest.get(id).ok_or_else(|| ModelError::UnknownParticipant(id.clone()))?;
            let pred_class = (0..p.class_probs.len()).fold(0, |b, c| if p.class_probs[c] > p.class_probs[b] { c } else { b });
            predictions.push(ParticipantPrediction {
                id: id.clone(),
                fold,
                true_class: rec.class_label.index(),
                pred_class,
                probs: p.class_probs,
                fpg_true: rec.fpg_mgdl,
                fpg_pred: p.glucose_mgdl,
            });
        }
        models.push(model);
        histories.push(history);
    }
    predictions.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(CvOutput { variant: config.variant, predictions, models, histories })
}

#[derive(Clone, Debug)]
pub struct AblationResult {
    pub reports: Vec<MetricsReport>,
    pub outputs: Vec<CvOutput>,
}

/// Cross-validates all four variants on the same folds, seed and budget.
#[allow(clippy::too_many_arguments)]
pub fn run_ablation(
    data: &Dataset,
    manifest: &CohortManifest,
    folds: &FoldAssignment,
    base: &ModelConfig,
    hyper: &TrainHyper,
    budget: &SelectionBudget,
    seed: u64,
    bootstrap: usize,
) -> Result<AblationResult, ModelError> {
    let digest = folds.digest();
    let mut reports = Vec::with_capacity(4);
    let mut outputs = Vec::with_capacity(4);
    for variant in Variant::ALL {
        let out = cross_validate(data, manifest, folds, &base.with_variant(variant), hyper, budget, seed)?;
        reports.push(MetricsReport::build(variant.as_str(), &out.predictions, &digest, bootstrap, seed)?);
        outputs.push(out);
    }
    Ok(AblationResult { reports, outputs })
}

/// Mask that keeps only the straight view's embedding columns.
pub fn straight_only_mask(config: &ModelConfig) -> FeatureMask {
    let bits = (0..config.mask_len()).map(|i| i < config.embed_dim).collect();
    FeatureMask::new(bits).expect("embed_dim >= 1")
}
