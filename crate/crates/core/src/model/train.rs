use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    build_model, composite_loss, forward, GlucoseScaler, ModelConfig, ModelError, MultiViewInput, TrainedModel,
    CLASSES,
};
use crate::autonn::{AdamConfig, Graph, ParamStore};
use crate::evalkit::FoldAssignment;
use crate::mrfo::FeatureMask;
use crate::synthcohort::CohortManifest;

use super::data::{Dataset, GuardedSource};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainHyper {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self { lr: 1e-3, batch_size: 16, epochs: 60 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// NaN when the fold has no validation participants.
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    /// Parameters from the epoch with the lowest validation loss, or the
    /// final epoch when there is no validation set.
    pub model: TrainedModel,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,train_loss,val_loss,val_accuracy\n");
    for r in history {
        s.push_str(&format!("{},{},{},{}\n", r.epoch, r.train_loss, r.val_loss, r.val_accuracy));
    }
    s
}

struct Batch<'a> {
    inputs: Vec<&'a MultiViewInput>,
    labels: Vec<usize>,
    fpg: Vec<f64>,
}

fn gather<'a>(
    ids: &[&str],
    source: &GuardedSource<'a>,
    manifest: &CohortManifest,
) -> Result<Batch<'a>, ModelError> {
    let mut b = Batch { inputs: Vec::new(), labels: Vec::new(), fpg: Vec::new() };
    for id in ids {
        let rec = manifest.get(id).ok_or_else(|| ModelError::UnknownParticipant(id.to_string()))?;
        b.inputs.push(source.fetch(id)?);
        b.labels.push(rec.class_label.index());
        b.fpg.push(rec.fpg_mgdl);
    }
    Ok(b)
}

/// Loss and accuracy over `ids` without touching gradients.
fn evaluate_loss(
    params: &ParamStore,
    config: &ModelConfig,
    scaler: &GlucoseScaler,
    mask: Option<&[f64]>,
    ids: &[&str],
    source: &GuardedSource<'_>,
    manifest: &CohortManifest,
) -> Result<(f64, f64), ModelError> {
    let (mut loss, mut correct) = (0.0, 0usize);
    for chunk in ids.chunks(32) {
        let b = gather(chunk, source, manifest)?;
        let mut g = Graph::new();
        let nodes = forward(&mut g, params, config, &b.inputs, mask)?;
        let l = composite_loss(&mut g, nodes.logits, nodes.glucose_z, &b.labels, &b.fpg, scaler, config.lambda_reg)?;
        loss += g.value(l).item() * chunk.len() as f64;
        for (row, &y) in g.value(nodes.logits).data().chunks(CLASSES).zip(&b.labels) {
            let arg = (0..CLASSES).fold(0, |best, c| if row[c] > row[best] { c } else { best });
            correct += (arg == y) as usize;
        }
    }
    Ok((loss / ids.len() as f64, correct as f64 / ids.len() as f64))
}

/// Trains one fold with mini-batch Adam on the composite loss.
///
/// Inputs are read only through a guard that rejects the fold's test
/// participants. Each epoch visits the training set in a permutation drawn
/// from `seed` and the epoch number. `init` continues from existing
/// parameters (and their Adam moments) instead of a fresh initialization.
#[allow(clippy::too_many_arguments)]
pub fn train_fold(
    data: &Dataset,
    manifest: &CohortManifest,
    folds: &FoldAssignment,
    fold: usize,
    config: &ModelConfig,
    hyper: &TrainHyper,
    seed: u64,
    mask: Option<&FeatureMask>,
    init: Option<ParamStore>,
) -> Result<TrainOutput, ModelError> {
    config.validate()?;
    if hyper.batch_size == 0 || !(hyper.lr > 0.0) {
        return Err(ModelError::InvalidConfig(format!("batch {} lr {}", hyper.batch_size, hyper.lr)));
    }
    if fold >= folds.k() {
        return Err(ModelError::InvalidConfig(format!("fold {fold} of {}", folds.k())));
    }
    let roles = folds.roles(fold);
    let source = data.guarded(roles.test.iter().map(String::as_str));
    let train_ids: Vec<&str> = roles.train.iter().map(String::as_str).collect();
    let val_ids: Vec<&str> = roles.val.iter().map(String::as_str).collect();
    if train_ids.is_empty() {
        return Err(ModelError::InvalidConfig(format!("fold {fold} has no training participants")));
    }
    // every training participant passes the guard before any work starts
    for id in &train_ids {
        source.fetch(id)?;
    }

    let fpg: Vec<f64> = train_ids
        .iter()
        .map(|id| manifest.get(id).map(|r| r.fpg_mgdl).ok_or_else(|| ModelError::UnknownParticipant(id.to_string())))
        .collect::<Result<_, _>>()?;
    let scaler = GlucoseScaler::fit(&fpg);
    let mut params = match init {
        Some(p) => p,
        None => build_model(config, seed)?,
    };
    let adam = AdamConfig { lr: hyper.lr, ..AdamConfig::default() };
    let weights = mask.map(FeatureMask::as_weights);
    let mask_w = weights.as_deref();

    let mut history = Vec::with_capacity(hyper.epochs);
    let mut best: Option<(f64, ParamStore, usize)> = None;
    for epoch in 1..=hyper.epochs {
        let mut order = train_ids.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);

        let mut total = 0.0;
        for chunk in order.chunks(hyper.batch_size) {
            let b = gather(chunk, &source, manifest)?;
            let mut g = Graph::new();
            let nodes = forward(&mut g, &params, config, &b.inputs, mask_w)?;
            let loss = composite_loss(&mut g, nodes.logits, nodes.glucose_z, &b.labels, &b.fpg, &scaler, config.lambda_reg)?;
            let lv = g.value(loss).item();
            if !lv.is_finite() {
                return Err(ModelError::NonFiniteLoss { epoch });
            }
            total += lv * chunk.len() as f64;
            g.backward(loss)?;
            for (name, grad) in g.param_grads() {
                params.accumulate_grad(&name, &grad)?;
            }
            params.adam_step(&adam);
            params.zero_grads();
        }
        let train_loss = total / order.len() as f64;

        let (val_loss, val_accuracy) = if val_ids.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            evaluate_loss(&params, config, &scaler, mask_w, &val_ids, &source, manifest)?
        };
        if !val_loss.is_nan() && !val_loss.is_finite() {
            return Err(ModelError::NonFiniteLoss { epoch });
        }
        log::debug!("fold {fold} epoch {epoch}: train {train_loss:.4} val {val_loss:.4} acc {val_accuracy:.3}");
        history.push(EpochRecord { epoch, train_loss, val_loss, val_accuracy });
        if !val_ids.is_empty() && best.as_ref().is_none_or(|(b, _, _)| val_loss < *b) {
            best = Some((val_loss, params.clone(), epoch));
        }
    }
    let (params, best_epoch) = match best {
        Some((_, p, e)) => (p, e),
        None => (params, hyper.epochs),
    };
    Ok(TrainOutput {
        model: TrainedModel { config: config.clone(), params, scaler, mask: mask.cloned() },
        history,
        best_epoch,
    })
}
