use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sclera_core::evalkit::{group_kfold, FoldAssignment, MetricsReport};
use sclera_core::fsutil::write_atomic;
use sclera_core::imgproc::{load_image, preprocess_view, save_image, to_gray, GrayImage, Roi};
use sclera_core::model::{
    cross_validate, run_ablation, AblationResult, CvOutput, Dataset, MultiViewInput, QcFailure, TrainedModel,
};
use sclera_core::saliency::{class_activation_map, overlay, Heatmap, Method, Target};
use sclera_core::synthcohort::{read_manifest, sample_cohort, write_cohort, write_manifest, CohortManifest, View, ViewEntry};

use crate::outputs::{read_folds_csv, write_ablation, write_run};
use crate::{CliError, RunConfig};

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("cannot create {}: {e}", dir.display())))
}

/// Writes the cohort's images, `manifest.csv` and `truth.csv` under `out`.
pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<CohortManifest, CliError> {
    let manifest = sample_cohort(cfg.counts, cfg.seed())?;
    if let Some(id) = cfg.corrupt.iter().find(|id| manifest.get(id).is_none()) {
        return Err(CliError::Config(format!("corrupt lists unknown participant {id}")));
    }
    create_dir(out)?;
    write_cohort(&manifest, out, &cfg.corrupt)?;
    log::info!("wrote {} participants to {}", manifest.records.len(), out.display());
    Ok(manifest)
}

#[derive(Clone, Debug)]
pub struct PreprocessSummary {
    pub included: usize,
    pub failures: Vec<QcFailure>,
}

fn derived_name(dir: &str, id: &str, view: View) -> String {
    format!("{dir}/{id}_{view}.pgm")
}

/// Preprocesses every view listed in `input/manifest.csv`.
///
/// `out` becomes a cohort directory of its own: `vesselness/` (8-bit) and
/// `gray/` (grayscale ROI crops) per view, `masks/` when enabled, a
/// manifest restricted to participants whose five views all pass quality
/// control, and `qc_failures.csv` listing the views that did not.
pub fn cmd_preprocess(cfg: &RunConfig, input: &Path, out: &Path) -> Result<PreprocessSummary, CliError> {
    let manifest = read_manifest(input)?;
    let params = cfg.preprocess_params();
    let mut dirs = vec!["vesselness", "gray"];
    if cfg.save_masks {
        dirs.push("masks");
    }
    for d in &dirs {
        create_dir(&out.join(d))?;
    }

    let mut failures = Vec::new();
    let mut kept = Vec::new();
    for r in &manifest.records {
        let mut ok = true;
        for e in &r.views {
            let raster = load_image(&input.join(&e.image_path))?;
            let pv = preprocess_view(&raster, e.roi, &params)?;
            let id = &r.participant_id;
            save_image(&pv.vesselness.to_raster(), &out.join(derived_name("vesselness", id, e.view)))?;
            save_image(&to_gray(&raster.crop(e.roi)?).to_raster(), &out.join(derived_name("gray", id, e.view)))?;
            if cfg.save_masks {
                save_image(&pv.mask.to_raster(), &out.join(derived_name("masks", id, e.view)))?;
            }
            if !pv.qc.pass {
                ok = false;
                failures.push(QcFailure { participant_id: id.clone(), view: e.view, report: pv.qc });
            }
        }
        if ok {
            let mut rec = r.clone();
            let size = cfg.working_size;
            for e in &mut rec.views {
                *e = ViewEntry {
                    view: e.view,
                    image_path: derived_name("vesselness", &r.participant_id, e.view),
                    roi: Roi { x: 0, y: 0, w: size, h: size },
                };
            }
            kept.push(rec);
        }
    }
    let included = kept.len();
    let reduced = CohortManifest { records: kept, seed: manifest.seed, generator_version: manifest.generator_version };
    write_manifest(&reduced, out)?;

    let mut csv = String::from("participant_id,view,blur_score,specular_fraction,mean_intensity\n");
    for f in &failures {
        let q = &f.report;
        let _ = writeln!(
            csv,
            "{},{},{},{},{}",
            f.participant_id, f.view, q.blur_score, q.specular_fraction, q.mean_intensity
        );
    }
    write_atomic(&out.join("qc_failures.csv"), csv.as_bytes())?;
    log::info!("{included} participants kept, {} views failed quality control", failures.len());
    Ok(PreprocessSummary { included, failures })
}

fn load_input(dir: &Path, views: &[ViewEntry], size: usize) -> Result<MultiViewInput, CliError> {
    let imgs = views
        .iter()
        .map(|e| {
            let g = to_gray(&load_image(&dir.join(&e.image_path))?);
            if g.width() != size || g.height() != size {
                return Err(CliError::Config(format!(
                    "{} is {}x{}, expected {size}x{size}; rerun preprocess with this config",
                    e.image_path,
                    g.width(),
                    g.height()
                )));
            }
            Ok(g)
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    Ok(MultiViewInput::new(imgs)?)
}

/// Reads a `preprocess` output directory.
pub fn load_preprocessed(dir: &Path, size: usize) -> Result<(CohortManifest, Dataset), CliError> {
    let manifest = read_manifest(dir)?;
    let mut data = Dataset::default();
    for r in &manifest.records {
        data.insert(r.participant_id.clone(), load_input(dir, &r.views, size)?);
    }
    Ok((manifest, data))
}

fn folds_for(cfg: &RunConfig, manifest: &CohortManifest) -> Result<FoldAssignment, CliError> {
    Ok(group_kfold(&manifest.labels(), cfg.k, cfg.seed())?)
}

pub struct TrainEvalOutput {
    pub report: MetricsReport,
    pub cv: CvOutput,
    pub folds: FoldAssignment,
}

/// Grouped k-fold cross-validation of `cfg.variant` on a preprocessed cohort.
pub fn cmd_train_eval(cfg: &RunConfig, input: &Path, out: &Path) -> Result<TrainEvalOutput, CliError> {
    let (manifest, data) = load_preprocessed(input, cfg.working_size)?;
    let folds = folds_for(cfg, &manifest)?;
    create_dir(out)?;
    let cv = cross_validate(&data, &manifest, &folds, &cfg.model_config(), &cfg.hyper(), &cfg.budget(), cfg.seed())?;
    let report = MetricsReport::build(cfg.variant.as_str(), &cv.predictions, &folds.digest(), cfg.bootstrap, cfg.seed())?;
    write_run(out, &folds, &cv, &report, cfg.seed())?;
    log::info!(
        "{}: accuracy {:.4}, MAE {:.2} mg/dL, r {:?}",
        report.variant,
        report.classification.accuracy,
        report.regression.mae,
        report.regression.pearson_r
    );
    Ok(TrainEvalOutput { report, cv, folds })
}

/// All four variants on one fold assignment; `cfg.variant` is ignored.
pub fn cmd_ablate(cfg: &RunConfig, input: &Path, out: &Path) -> Result<AblationResult, CliError> {
    let (manifest, data) = load_preprocessed(input, cfg.working_size)?;
    let folds = folds_for(cfg, &manifest)?;
    create_dir(out)?;
    let result = run_ablation(
        &data,
        &manifest,
        &folds,
        &cfg.model_config(),
        &cfg.hyper(),
        &cfg.budget(),
        cfg.seed(),
        cfg.bootstrap,
    )?;
    write_ablation(out, &result.reports, &result.outputs)?;
    Ok(result)
}

enum CheckpointSource {
    /// A `train-eval` directory: participant id to held-out fold.
    Run { models: PathBuf, folds: Vec<(String, usize)> },
    Single(TrainedModel),
}

impl CheckpointSource {
    fn open(path: &Path) -> Result<Self, CliError> {
        if path.join("folds.csv").is_file() {
            return Ok(Self::Run { models: path.join("models"), folds: read_folds_csv(&path.join("folds.csv"))? });
        }
        let (dir, stem) = match (path.parent(), path.file_name()) {
            (Some(d), Some(s)) => (d, s.to_string_lossy().into_owned()),
            _ => return Err(CliError::Config(format!("checkpoint {} not found", path.display()))),
        };
        Ok(Self::Single(TrainedModel::load(dir, &stem)?))
    }

    fn model_for(&self, id: &str) -> Result<TrainedModel, CliError> {
        match self {
            Self::Single(m) => Ok(m.clone()),
            Self::Run { models, folds } => {
                let fold = folds
                    .iter()
                    .find(|(p, _)| p == id)
                    .map(|(_, f)| *f)
                    .ok_or_else(|| CliError::Config(format!("participant {id} is not part of the checkpoint's folds")))?;
                Ok(TrainedModel::load(models, &format!("fold{fold}"))?)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct SaliencyRecord {
    pub participant_id: String,
    pub method: Method,
    pub heatmap: Heatmap,
}

/// Grad-CAM and Grad-CAM++ overlays for all five views of each participant,
/// targeting the predicted class, written as `saliency/<id>/<view>_<method>.ppm`
/// with the raw map alongside as CSV.
pub fn cmd_saliency(
    cfg: &RunConfig,
    input: &Path,
    checkpoint: &Path,
    participants: &[String],
    out: &Path,
) -> Result<Vec<SaliencyRecord>, CliError> {
    if participants.is_empty() {
        return Err(CliError::Config("no participants requested".into()));
    }
    let manifest = read_manifest(input)?;
    let records = participants
        .iter()
        .map(|id| manifest.get(id).ok_or_else(|| CliError::Config(format!("unknown participant {id}"))))
        .collect::<Result<Vec<_>, _>>()?;
    let source = CheckpointSource::open(checkpoint)?;
    let block = cfg.saliency_block();

    let mut index = String::from("participant_id,view,method,target_class,all_zero\n");
    let mut out_records = Vec::new();
    for r in records {
        let id = &r.participant_id;
        let model = source.model_for(id)?;
        let x = load_input(input, &r.views, model.config.input_size)?;
        let dir = out.join("saliency").join(id);
        create_dir(&dir)?;
        for e in &r.views {
            let gray_path = input.join(derived_name("gray", id, e.view));
            let base: GrayImage = if gray_path.is_file() { to_gray(&load_image(&gray_path)?) } else { x.view(e.view.index()).clone() };
            for method in Method::ALL {
                let h = class_activation_map(&model, &x, Target::Predicted, e.view, block, method)?;
                save_image(&overlay(&h, &base, cfg.overlay_alpha), &dir.join(format!("{}_{method}.ppm", e.view)))?;
                write_atomic(&dir.join(format!("{}_{method}.csv", e.view)), h.to_csv().as_bytes())?;
                let _ = writeln!(index, "{id},{},{method},{},{}", e.view, h.target_class, h.all_zero);
                out_records.push(SaliencyRecord { participant_id: id.clone(), method, heatmap: h });
            }
        }
    }
    write_atomic(&out.join("saliency").join("index.csv"), index.as_bytes())?;
    Ok(out_records)
}
