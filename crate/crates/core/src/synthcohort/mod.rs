//! Synthetic multiview scleral cohort with known vascular ground truth.
//!
//! Each participant gets a class, a fasting glucose value drawn from that
//! class's distribution, and vessel parameters that grow with glucose. Five
//! gaze views are rendered; every vessel is fully drawn in one home view
//! and partially in one neighbour, so each view sees only part of the tree.

mod manifest;
mod render;

pub use manifest::{read_manifest, write_cohort, write_manifest, MANIFEST_HEADER, TRUTH_HEADER};
pub use render::{render_participant, render_views, vessel_visibility, RenderOptions, RenderedParticipant, RAW_SIZE, ROI_SIZE};

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use thiserror::Error;

use crate::imgproc::{ImgError, Roi};

pub const GENERATOR_VERSION: &str = "synthcohort-1";

/// Participants per class in the reference cohort.
pub const DEFAULT_COUNTS: [usize; 3] = [150, 140, 155];

/// Glucose (mean, sd) per class in mg/dL.
pub const CLASS_FPG: [(f64, f64); 3] = [(92.4, 8.1), (133.8, 14.7), (204.9, 28.6)];

/// Truncation interval of the glucose draw, mg/dL.
pub const FPG_RANGE: (f64, f64) = (50.0, 400.0);

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("manifest schema: {0}")]
    Schema(String),
    #[error(transparent)]
    Image(#[from] ImgError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<csv::Error> for SynthError {
    fn from(e: csv::Error) -> Self {
        if e.is_io_error() {
            match e.into_kind() {
                csv::ErrorKind::Io(io) => SynthError::Io(io),
                _ => unreachable!(),
            }
        } else {
            SynthError::Schema(e.to_string())
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ClassLabel {
    Normal,
    Controlled,
    HighGlucose,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 3] = [ClassLabel::Normal, ClassLabel::Controlled, ClassLabel::HighGlucose];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ClassLabel::Normal => "normal",
            ClassLabel::Controlled => "controlled",
            ClassLabel::HighGlucose => "high_glucose",
        }
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ClassLabel {
    type Err = SynthError;
    fn from_str(s: &str) -> Result<Self, SynthError> {
        Self::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| SynthError::Schema(format!("unknown class label {s:?}")))
    }
}

/// Gaze direction, in the fixed order used everywhere downstream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum View {
    Straight,
    Up,
    Down,
    Left,
    Right,
}

impl View {
    pub const ALL: [View; 5] = [View::Straight, View::Up, View::Down, View::Left, View::Right];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            View::Straight => "straight",
            View::Up => "up",
            View::Down => "down",
            View::Left => "left",
            View::Right => "right",
        }
    }
}

impl fmt::Display for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for View {
    type Err = SynthError;
    fn from_str(s: &str) -> Result<Self, SynthError> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| SynthError::Schema(format!("unknown view {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewEntry {
    pub view: View,
    /// Relative to the cohort directory.
    pub image_path: String,
    pub roi: Roi,
}

/// Generator parameters behind one participant's vessels.
#[derive(Clone, Debug, PartialEq)]
pub struct VascularTruth {
    pub vessel_count: usize,
    pub tortuosity_px: f64,
    pub caliber_mean_px: f64,
    pub caliber_var_px2: f64,
}

impl VascularTruth {
    /// Monotone maps of glucose; `jitter` holds two standard-normal draws.
    pub fn from_fpg(fpg: f64, jitter: [f64; 2]) -> Self {
        let excess = fpg - 80.0;
        Self {
            vessel_count: (8.0 + 0.12 * excess).round().max(3.0) as usize,
            tortuosity_px: ((0.5 + 0.02 * excess) * (1.0 + 0.05 * jitter[0])).max(0.1),
            caliber_mean_px: ((1.4 + 0.01 * excess) * (1.0 + 0.03 * jitter[1])).max(0.8),
            caliber_var_px2: (0.04 + 0.0015 * excess).max(0.01),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParticipantRecord {
    pub participant_id: String,
    pub class_label: ClassLabel,
    pub fpg_mgdl: f64,
    /// Always five entries in [`View::ALL`] order.
    pub views: Vec<ViewEntry>,
    pub truth: VascularTruth,
}

impl ParticipantRecord {
    pub fn view(&self, v: View) -> &ViewEntry {
        &self.views[v.index()]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CohortManifest {
    /// Sorted by participant id.
    pub records: Vec<ParticipantRecord>,
    pub seed: u64,
    pub generator_version: String,
}

impl CohortManifest {
    pub fn get(&self, id: &str) -> Option<&ParticipantRecord> {
        self.records
            .binary_search_by(|r| r.participant_id.as_str().cmp(id))
            .ok()
            .map(|i| &self.records[i])
    }

    /// `(participant_id, class index)` pairs for fold assignment.
    pub fn labels(&self) -> Vec<(String, usize)> {
        self.records.iter().map(|r| (r.participant_id.clone(), r.class_label.index())).collect()
    }
}

pub(crate) fn image_rel_path(id: &str, view: View) -> String {
    format!("images/{id}_{view}.pgm")
}

/// Rejection sampling from `N(mean, sd)` restricted to the open range.
fn truncated_normal(rng: &mut ChaCha8Rng, mean: f64, sd: f64, range: (f64, f64)) -> f64 {
    let n = Normal::new(mean, sd).expect("positive sd");
    loop {
        let v = n.sample(rng);
        if v > range.0 && v < range.1 {
            return v;
        }
    }
}

/// Draws class labels, glucose, vessel parameters and per-view crops.
///
/// The class sequence is shuffled once from the base stream; participant
/// `i` then draws everything else from its own stream `i + 1`, so records
/// do not depend on one another.
pub fn sample_cohort(counts: [usize; 3], seed: u64) -> Result<CohortManifest, SynthError> {
    if counts.contains(&0) {
        return Err(SynthError::InvalidParam(format!("class counts {counts:?} must all be positive")));
    }
    let mut labels: Vec<ClassLabel> =
        ClassLabel::ALL.iter().zip(counts).flat_map(|(&c, n)| std::iter::repeat_n(c, n)).collect();
    let mut base = ChaCha8Rng::seed_from_u64(seed);
    labels.shuffle(&mut base);
    let width = labels.len().to_string().len().max(4);
    let margin = (RAW_SIZE - ROI_SIZE) / 2;

    let records = labels
        .into_iter()
        .enumerate()
        .map(|(i, class_label)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64 + 1);
            let (mean, sd) = CLASS_FPG[class_label.index()];
            let fpg_mgdl = truncated_normal(&mut rng, mean, sd, FPG_RANGE);
            let jitter = [StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng)];
            let participant_id = format!("P{:0width$}", i + 1);
            let views = View::ALL
                .iter()
                .map(|&view| ViewEntry {
                    view,
                    image_path: image_rel_path(&participant_id, view),
                    roi: Roi {
                        x: rng.random_range(margin / 2..=margin + margin / 2),
                        y: rng.random_range(margin / 2..=margin + margin / 2),
                        w: ROI_SIZE,
                        h: ROI_SIZE,
                    },
                })
                .collect();
            ParticipantRecord {
                participant_id,
                class_label,
                fpg_mgdl,
                views,
                truth: VascularTruth::from_fpg(fpg_mgdl, jitter),
            }
        })
        .collect();
    Ok(CohortManifest { records, seed, generator_version: GENERATOR_VERSION.to_string() })
}
