//! The multiview glucose network: five convolutional view branches, an
//! optional feature mask over the concatenated embeddings, dense or
//! transformer fusion, and joint class / glucose heads.

mod cv;
mod data;
mod forward;
mod train;

pub use cv::{cross_validate, run_ablation, straight_only_mask, AblationResult, CvOutput, SelectionBudget};
pub use data::{load_dataset, Dataset, GuardedSource, MultiViewInput, QcFailure};
pub use forward::{composite_loss, forward, predict, ForwardNodes, Prediction};
pub use train::{history_csv, train_fold, EpochRecord, TrainHyper, TrainOutput};

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autonn::{he_uniform, AttentionParams, NnError, ParamStore, Tensor};
use crate::evalkit::EvalError;
use crate::fsutil::write_atomic;
use crate::imgproc::ImgError;
use crate::mrfo::{FeatureMask, MrfoError};
use crate::synthcohort::SynthError;

pub const VIEWS: usize = 5;
pub const CLASSES: usize = 3;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("participant {id} of the test fold reached the training stream")]
    LeakageDetected { id: String },
    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("unknown participant {0}")]
    UnknownParticipant(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Mrfo(#[from] MrfoError),
    #[error(transparent)]
    Image(#[from] ImgError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    SingleView,
    Multiview,
    MultiviewMrfo,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::SingleView, Variant::Multiview, Variant::MultiviewMrfo, Variant::Full];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::SingleView => "single_view",
            Variant::Multiview => "multiview",
            Variant::MultiviewMrfo => "multiview_mrfo",
            Variant::Full => "full",
        }
    }

    /// Whether training includes a feature-selection stage.
    pub fn selects_features(self) -> bool {
        matches!(self, Variant::MultiviewMrfo | Variant::Full)
    }

    pub fn views(self) -> usize {
        if self == Variant::SingleView {
            1
        } else {
            VIEWS
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, ModelError> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| ModelError::InvalidConfig(format!("unknown variant {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_size: usize,
    pub branch_channels: Vec<usize>,
    pub embed_dim: usize,
    pub fusion_dim: usize,
    pub fusion_layers: usize,
    pub fusion_heads: usize,
    pub lambda_reg: f64,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            branch_channels: vec![8, 16, 32],
            embed_dim: 32,
            fusion_dim: 64,
            fusion_layers: 2,
            fusion_heads: 4,
            lambda_reg: 1.0,
            variant: Variant::Full,
        }
    }
}

impl ModelConfig {
    pub fn with_variant(&self, variant: Variant) -> Self {
        Self { variant, ..self.clone() }
    }

    pub fn mask_len(&self) -> usize {
        VIEWS * self.embed_dim
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.branch_channels.is_empty() || self.branch_channels.contains(&0) {
            return bad(format!("branch channels {:?}", self.branch_channels));
        }
        let down = 1usize << self.branch_channels.len();
        if self.input_size == 0 || self.input_size % down != 0 {
            return bad(format!("input size {} not divisible by {down}", self.input_size));
        }
        if self.embed_dim == 0 || self.fusion_dim == 0 {
            return bad("embedding and fusion widths must be positive".into());
        }
        if self.fusion_heads == 0 || self.fusion_dim % self.fusion_heads != 0 {
            return bad(format!("fusion dim {} not divisible by {} heads", self.fusion_dim, self.fusion_heads));
        }
        if !(self.lambda_reg >= 0.0) || !self.lambda_reg.is_finite() {
            return bad(format!("lambda_reg {}", self.lambda_reg));
        }
        Ok(())
    }
}

/// Parameter names, shared by initialization and the forward pass.
pub(crate) mod names {
    pub fn conv_w(view: usize, block: usize) -> String {
        format!("branch{view}.conv{block}.weight")
    }
    pub fn conv_b(view: usize, block: usize) -> String {
        format!("branch{view}.conv{block}.bias")
    }
    pub fn embed_w(view: usize) -> String {
        format!("branch{view}.embed.weight")
    }
    pub fn embed_b(view: usize) -> String {
        format!("branch{view}.embed.bias")
    }
    pub const FUSE_W: &str = "fusion.dense.weight";
    pub const FUSE_B: &str = "fusion.dense.bias";
    pub fn token_w(view: usize) -> String {
        format!("fusion.token{view}.weight")
    }
    pub fn token_b(view: usize) -> String {
        format!("fusion.token{view}.bias")
    }
    pub fn layer(l: usize, part: &str) -> String {
        format!("fusion.layer{l}.{part}")
    }
    pub const FINAL_LN_G: &str = "fusion.norm.gamma";
    pub const FINAL_LN_B: &str = "fusion.norm.beta";
    pub const CLS_W: &str = "head.class.weight";
    pub const CLS_B: &str = "head.class.bias";
    pub const REG_W: &str = "head.glucose.weight";
    pub const REG_B: &str = "head.glucose.bias";
}

/// Allocates and initializes every parameter of `config.variant`.
///
/// Weights are He-uniform, biases zero, layer-norm gains one. Each weight
/// gets its own seed derived from `seed` and its position in creation order.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<ParamStore, ModelError> {
    config.validate()?;
    let mut store = ParamStore::new();
    let mut counter = 0u64;
    let mut next_seed = || {
        counter += 1;
        seed ^ counter.wrapping_mul(0x9E37_79B9_7F4A_7C15)
    };
    let dense = |store: &mut ParamStore, w: &str, b: &str, din: usize, dout: usize, s: u64| {
        store.insert(w, he_uniform(&[din, dout], din, s));
        store.insert(b, Tensor::zeros(&[dout]));
    };

    let last = *config.branch_channels.last().expect("validated");
    for v in 0..config.variant.views() {
        let mut cin = 1;
        for (j, &cout) in config.branch_channels.iter().enumerate() {
            store.insert(names::conv_w(v, j), he_uniform(&[cout, cin, 3, 3], cin * 9, next_seed()));
            store.insert(names::conv_b(v, j), Tensor::zeros(&[cout]));
            cin = cout;
        }
        dense(&mut store, &names::embed_w(v), &names::embed_b(v), last, config.embed_dim, next_seed());
    }

    let (e, f) = (config.embed_dim, config.fusion_dim);
    match config.variant {
        Variant::SingleView => dense(&mut store, names::FUSE_W, names::FUSE_B, e, f, next_seed()),
        Variant::Multiview | Variant::MultiviewMrfo => {
            dense(&mut store, names::FUSE_W, names::FUSE_B, VIEWS * e, f, next_seed())
        }
        Variant::Full => {
            for v in 0..VIEWS {
                dense(&mut store, &names::token_w(v), &names::token_b(v), e, f, next_seed());
            }
            for l in 0..config.fusion_layers {
                for ln in ["ln1", "ln2"] {
                    store.insert(names::layer(l, &format!("{ln}.gamma")), Tensor::full(&[f], 1.0));
                    store.insert(names::layer(l, &format!("{ln}.beta")), Tensor::zeros(&[f]));
                }
                AttentionParams::with_prefix(&names::layer(l, "attn")).init(&mut store, f, next_seed());
                dense(&mut store, &names::layer(l, "ff1.weight"), &names::layer(l, "ff1.bias"), f, 2 * f, next_seed());
                dense(&mut store, &names::layer(l, "ff2.weight"), &names::layer(l, "ff2.bias"), 2 * f, f, next_seed());
            }
            store.insert(names::FINAL_LN_G, Tensor::full(&[f], 1.0));
            store.insert(names::FINAL_LN_B, Tensor::zeros(&[f]));
        }
    }
    dense(&mut store, names::CLS_W, names::CLS_B, f, CLASSES, next_seed());
    dense(&mut store, names::REG_W, names::REG_B, f, 1, next_seed());
    Ok(store)
}

/// Training-fold glucose statistics used to regress a z-score.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlucoseScaler {
    pub mean: f64,
    pub sd: f64,
}

impl GlucoseScaler {
    /// Mean and population sd; a degenerate sample falls back to sd 1.
    pub fn fit(values: &[f64]) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        Self { mean, sd: if sd > 0.0 && sd.is_finite() { sd } else { 1.0 } }
    }

    pub fn to_z(&self, mgdl: f64) -> f64 {
        (mgdl - self.mean) / self.sd
    }

    pub fn to_mgdl(&self, z: f64) -> f64 {
        z * self.sd + self.mean
    }
}

/// Parameters plus everything needed to run inference.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub scaler: GlucoseScaler,
    pub mask: Option<FeatureMask>,
}

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    config: ModelConfig,
    scaler: GlucoseScaler,
    mask: Option<Vec<bool>>,
}

impl TrainedModel {
    pub fn mask_weights(&self) -> Option<Vec<f64>> {
        self.mask.as_ref().map(FeatureMask::as_weights)
    }

    /// Writes `<stem>.ckpt` (parameter values) and `<stem>.json` (config,
    /// glucose scaler, feature mask).
    pub fn save(&self, dir: &Path, stem: &str) -> Result<(), ModelError> {
        write_atomic(&dir.join(format!("{stem}.ckpt")), &self.params.to_checkpoint_bytes())?;
        let meta = ModelMeta {
            config: self.config.clone(),
            scaler: self.scaler,
            mask: self.mask.as_ref().map(|m| m.bits().to_vec()),
        };
        let json = crate::evalkit::to_canonical_json(&meta);
        write_atomic(&dir.join(format!("{stem}.json")), json.as_bytes())?;
        Ok(())
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self, ModelError> {
        let params = ParamStore::from_checkpoint_bytes(&std::fs::read(dir.join(format!("{stem}.ckpt")))?)?;
        let meta: ModelMeta = serde_json::from_slice(&std::fs::read(dir.join(format!("{stem}.json")))?)
            .map_err(|e| ModelError::InvalidConfig(format!("{stem}.json: {e}")))?;
        let mask = meta.mask.map(FeatureMask::new).transpose()?;
        Ok(Self { config: meta.config, params, scaler: meta.scaler, mask })
    }
}
