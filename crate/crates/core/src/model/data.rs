use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use super::{ModelError, VIEWS};
use crate::imgproc::{load_image, preprocess_view, GrayImage, PreprocessParams, QcReport};
use crate::synthcohort::{CohortManifest, View};

/// Five preprocessed views of one participant, in [`View::ALL`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiViewInput {
    views: Vec<GrayImage>,
}

impl MultiViewInput {
    pub fn new(views: Vec<GrayImage>) -> Result<Self, ModelError> {
        if views.len() != VIEWS {
            return Err(ModelError::InvalidConfig(format!("{} views, expected {VIEWS}", views.len())));
        }
        let (w, h) = (views[0].width(), views[0].height());
        if w != h || views.iter().any(|v| v.width() != w || v.height() != h) {
            return Err(ModelError::InvalidConfig("views must be square and equally sized".into()));
        }
        Ok(Self { views })
    }

    pub fn view(&self, i: usize) -> &GrayImage {
        &self.views[i]
    }

    pub fn size(&self) -> usize {
        self.views[0].width()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QcFailure {
    pub participant_id: String,
    pub view: View,
    pub report: QcReport,
}

/// Preprocessed inputs keyed by participant id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    inputs: BTreeMap<String, MultiViewInput>,
}

impl Dataset {
    pub fn insert(&mut self, id: impl Into<String>, input: MultiViewInput) {
        self.inputs.insert(id.into(), input);
    }

    pub fn contains(&self, id: &str) -> bool {
        self.inputs.contains_key(id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.inputs.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn get(&self, id: &str) -> Result<&MultiViewInput, ModelError> {
        self.inputs.get(id).ok_or_else(|| ModelError::UnknownParticipant(id.to_string()))
    }

    /// Read access that refuses every id in `forbidden`.
    pub fn guarded<'a>(&'a self, forbidden: impl IntoIterator<Item = &'a str>) -> GuardedSource<'a> {
        GuardedSource { data: self, forbidden: forbidden.into_iter().collect() }
    }
}

/// The only path by which training and feature selection read inputs.
pub struct GuardedSource<'a> {
    data: &'a Dataset,
    forbidden: BTreeSet<&'a str>,
}

impl<'a> GuardedSource<'a> {
    pub fn fetch(&self, id: &str) -> Result<&'a MultiViewInput, ModelError> {
        if self.forbidden.contains(id) {
            return Err(ModelError::LeakageDetected { id: id.to_string() });
        }
        self.data.get(id)
    }
}

/// Loads and preprocesses every view listed in `manifest` (paths relative to
/// `dir`). A participant with any view failing quality control is left out
/// of the dataset and reported instead.
pub fn load_dataset(
    manifest: &CohortManifest,
    dir: &Path,
    params: &PreprocessParams,
) -> Result<(Dataset, Vec<QcFailure>), ModelError> {
    let mut data = Dataset::default();
    let mut failures = Vec::new();
    for r in &manifest.records {
        let mut views = Vec::with_capacity(VIEWS);
        let mut ok = true;
        for entry in &r.views {
            let raster = load_image(&dir.join(&entry.image_path))?;
            let out = preprocess_view(&raster, entry.roi, params)?;
            if !out.qc.pass {
                ok = false;
                failures.push(QcFailure { participant_id: r.participant_id.clone(), view: entry.view, report: out.qc });
            }
            views.push(out.vesselness);
        }
        if ok {
            data.insert(r.participant_id.clone(), MultiViewInput::new(views)?);
        }
    }
    Ok((data, failures))
}
