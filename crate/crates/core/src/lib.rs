//! Image preprocessing, a synthetic scleral cohort, a small autodiff
//! engine, the multiview glucose network, manta-ray feature selection,
//! evaluation metrics and saliency maps.

pub mod autonn;
pub mod evalkit;
pub mod fsutil;
pub mod imgproc;
pub mod model;
pub mod mrfo;
pub mod saliency;
pub mod synthcohort;
