//! Manta ray foraging optimization and the wrapper feature selector built on it.

mod optimizer;
mod select;

pub use optimizer::{mrfo_optimize, mrfo_step, MrfoConfig, MrfoResult, Population, UniformSource};
pub use select::{feature_select, FeatureMask, FeatureSelection, LinearProbe, DEFAULT_LAMBDA_RED, PROBE_LAMBDA};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MrfoError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("fitness is not finite at {0:?}")]
    NonFiniteFitness(Vec<f64>),
    #[error("probe features contain non-finite values")]
    NonFiniteFeatures,
    #[error("feature mask selects nothing")]
    EmptyMask,
    #[error("malformed mask file: {0}")]
    MalformedMask(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
