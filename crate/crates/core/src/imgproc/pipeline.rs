use super::{
    binarize, clahe, frangi, normalize_intensity, quality_check, to_gray, BinaryMask, FrangiParams, GrayImage, ImgError,
    QcReport, QcThresholds, RasterImage, Roi, Warning,
};

#[derive(Clone, Debug, PartialEq)]
pub struct PreprocessParams {
    /// Side of the square working image after downsampling the ROI.
    pub working_size: usize,
    pub p_low: f64,
    pub p_high: f64,
    pub clahe_tiles: usize,
    pub clahe_clip: f64,
    pub frangi: FrangiParams,
    pub qc: QcThresholds,
}

impl Default for PreprocessParams {
    fn default() -> Self {
        Self {
            working_size: 64,
            p_low: 1.0,
            p_high: 99.0,
            clahe_tiles: 4,
            clahe_clip: 2.0,
            frangi: FrangiParams::default(),
            qc: QcThresholds::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreprocessedView {
    /// Computed on the full-resolution grayscale ROI.
    pub qc: QcReport,
    pub vesselness: GrayImage,
    pub mask: BinaryMask,
    pub warnings: Vec<Warning>,
}

/// ROI crop, QC, downsample, percentile stretch, CLAHE, Frangi, Otsu.
pub fn preprocess_view(img: &RasterImage, roi: Roi, params: &PreprocessParams) -> Result<PreprocessedView, ImgError> {
    let gray = to_gray(&img.crop(roi)?);
    let qc = quality_check(&gray, &params.qc);
    let size = params.working_size;
    if size == 0 || roi.w != roi.h || roi.w % size != 0 {
        return Err(ImgError::InvalidParam(format!("ROI {}x{} cannot reduce to {size}", roi.w, roi.h)));
    }
    let small = gray.downsample(roi.w / size)?;
    let mut warnings = Vec::new();
    let (stretched, w) = normalize_intensity(&small, params.p_low, params.p_high)?;
    warnings.extend(w);
    let enhanced = clahe(&stretched, params.clahe_tiles, params.clahe_tiles, params.clahe_clip)?;
    let map = frangi(&enhanced, &params.frangi)?;
    let (mask, _, w) = binarize(&map);
    warnings.extend(w);
    Ok(PreprocessedView { qc, vesselness: map.to_gray(), mask, warnings })
}
