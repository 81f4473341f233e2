//! Flat `key = value` run configuration. Every key except `seed` is
//! optional; unknown keys are rejected.

use std::path::Path;

use serde::Deserialize;

use sclera_core::imgproc::{FrangiC, FrangiParams, PreprocessParams, QcThresholds};
use sclera_core::model::{ModelConfig, SelectionBudget, TrainHyper, Variant};
use sclera_core::synthcohort::DEFAULT_COUNTS;

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Mandatory: there is no wall-clock seeding.
    pub seed: Option<u64>,

    // cohort
    pub counts: [usize; 3],
    /// Participants whose straight view is rendered too dark to pass QC.
    pub corrupt: Vec<String>,

    // preprocessing
    pub working_size: usize,
    pub p_low: f64,
    pub p_high: f64,
    pub clahe_tiles: usize,
    pub clahe_clip: f64,
    pub frangi_scales: Vec<f64>,
    pub frangi_beta: f64,
    /// Fixed Frangi `c`; when absent, half the per-scale maximum Hessian norm.
    pub frangi_c: Option<f64>,
    pub qc_blur: f64,
    pub qc_specular: f64,
    pub qc_mean_lo: f64,
    pub qc_mean_hi: f64,
    pub save_masks: bool,

    // model
    pub variant: Variant,
    pub branch_channels: Vec<usize>,
    pub embed_dim: usize,
    pub fusion_dim: usize,
    pub fusion_layers: usize,
    pub fusion_heads: usize,
    pub lambda_reg: f64,

    // training and selection
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub mrfo_pop: usize,
    pub mrfo_iters: usize,
    pub lambda_red: f64,

    // evaluation
    pub k: usize,
    pub bootstrap: usize,

    // saliency
    pub participants: Vec<String>,
    /// Defaults to the last convolution block.
    pub saliency_block: Option<usize>,
    pub overlay_alpha: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let pre = PreprocessParams::default();
        let model = ModelConfig::default();
        let hyper = TrainHyper::default();
        let budget = SelectionBudget::default();
        Self {
            seed: None,
            counts: DEFAULT_COUNTS,
            corrupt: Vec::new(),
            working_size: pre.working_size,
            p_low: pre.p_low,
            p_high: pre.p_high,
            clahe_tiles: pre.clahe_tiles,
            clahe_clip: pre.clahe_clip,
            frangi_scales: pre.frangi.scales.clone(),
            frangi_beta: pre.frangi.beta,
            frangi_c: None,
            qc_blur: pre.qc.blur,
            qc_specular: pre.qc.specular,
            qc_mean_lo: pre.qc.mean_lo,
            qc_mean_hi: pre.qc.mean_hi,
            save_masks: false,
            variant: model.variant,
            branch_channels: model.branch_channels.clone(),
            embed_dim: model.embed_dim,
            fusion_dim: model.fusion_dim,
            fusion_layers: model.fusion_layers,
            fusion_heads: model.fusion_heads,
            lambda_reg: model.lambda_reg,
            lr: hyper.lr,
            batch_size: hyper.batch_size,
            epochs: hyper.epochs,
            mrfo_pop: budget.pop_size,
            mrfo_iters: budget.iters,
            lambda_red: budget.lambda_red,
            k: 5,
            bootstrap: sclera_core::evalkit::DEFAULT_BOOTSTRAP,
            participants: Vec::new(),
            saliency_block: None,
            overlay_alpha: 0.5,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn seed(&self) -> u64 {
        self.seed.expect("validated")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.seed.is_none() {
            return bad("`seed` is required".into());
        }
        if self.counts.contains(&0) {
            return bad(format!("counts {:?} must all be positive", self.counts));
        }
        if self.k < 3 {
            return bad(format!("k = {}: each fold needs separate train, validation and test groups", self.k));
        }
        if self.counts.iter().any(|&c| c < self.k) {
            return bad(format!("every class needs at least k = {} participants", self.k));
        }
        if self.batch_size == 0 || self.epochs == 0 || !(self.lr > 0.0) {
            return bad(format!("lr {} batch_size {} epochs {}", self.lr, self.batch_size, self.epochs));
        }
        if self.variant.selects_features() && (self.epochs < 2 || self.mrfo_pop == 0) {
            return bad("feature selection needs epochs >= 2 and mrfo_pop >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.overlay_alpha) {
            return bad(format!("overlay_alpha {} outside [0,1]", self.overlay_alpha));
        }
        if let Some(b) = self.saliency_block {
            if b >= self.branch_channels.len() {
                return bad(format!("saliency_block {b} of {}", self.branch_channels.len()));
            }
        }
        if !(self.lambda_red >= 0.0) {
            return bad(format!("lambda_red {}", self.lambda_red));
        }
        self.model_config().validate().map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn preprocess_params(&self) -> PreprocessParams {
        PreprocessParams {
            working_size: self.working_size,
            p_low: self.p_low,
            p_high: self.p_high,
            clahe_tiles: self.clahe_tiles,
            clahe_clip: self.clahe_clip,
            frangi: FrangiParams {
                scales: self.frangi_scales.clone(),
                beta: self.frangi_beta,
                c: self.frangi_c.map_or(FrangiC::HalfMaxStructureness, FrangiC::Fixed),
            },
            qc: QcThresholds {
                blur: self.qc_blur,
                specular: self.qc_specular,
                mean_lo: self.qc_mean_lo,
                mean_hi: self.qc_mean_hi,
            },
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            input_size: self.working_size,
            branch_channels: self.branch_channels.clone(),
            embed_dim: self.embed_dim,
            fusion_dim: self.fusion_dim,
            fusion_layers: self.fusion_layers,
            fusion_heads: self.fusion_heads,
            lambda_reg: self.lambda_reg,
            variant: self.variant,
        }
    }

    pub fn hyper(&self) -> TrainHyper {
        TrainHyper { lr: self.lr, batch_size: self.batch_size, epochs: self.epochs }
    }

    pub fn budget(&self) -> SelectionBudget {
        SelectionBudget { pop_size: self.mrfo_pop, iters: self.mrfo_iters, lambda_red: self.lambda_red }
    }

    pub fn saliency_block(&self) -> usize {
        self.saliency_block.unwrap_or(self.branch_channels.len() - 1)
    }
}
